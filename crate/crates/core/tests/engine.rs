use dmsgd_core::analysis::z_sequence;
use dmsgd_core::engine::{
    average_iterate, consensus_error, init_state, run, step, InitPolicy, RecordGrid, RunConfig,
    Scratch, Simulation,
};
use dmsgd_core::linalg::Mat;
use dmsgd_core::objectives::{Family, NoiseKey, NoiseModel, ObjectiveConfig, ObjectiveSpec};
use dmsgd_core::schedules::{Regime, ScheduleConfig, ScheduleFamily};
use dmsgd_core::topology::{MixingKind, TopologyConfig};
use dmsgd_core::Error;
use proptest::prelude::*;

fn config(kind: MixingKind, m: usize, k: u64, family: Family, noise: NoiseModel) -> RunConfig {
    RunConfig {
        topology: TopologyConfig {
            kind,
            m,
            k,
            beta: (kind == MixingKind::Easgd).then_some(0.1),
            neighbor_weight: (kind == MixingKind::Gossip).then_some(0.3),
        },
        objective: ObjectiveConfig {
            family,
            dim: 4,
            m,
            heterogeneity: 0.5,
            noise,
            box_radius: 1.0,
            dataset_seed: Some(2),
            min_curvature: None,
        },
        schedule: ScheduleConfig::default(),
        alpha: 0.0,
        horizon: 1000,
        seed: 21,
        record_every: 1,
        grid: RecordGrid::Linear,
        init: InitPolicy::PerWorkerRandom,
        guard: 1e6,
        keep_snapshots: false,
        track_workers: false,
    }
}

fn rows(x: &Mat) -> Vec<Vec<f64>> {
    (0..x.rows()).map(|i| x.row(i).to_vec()).collect()
}

/// Momentum-free decentralised SGD, written against plain vectors.
fn dpsgd_reference(sim: &Simulation, steps: u64) -> Vec<Vec<Vec<f64>>> {
    let m = sim.workers();
    let dim = sim.objective.dim();
    let mut x = rows(&init_state(sim).unwrap().x);
    let mut history = vec![x.clone()];
    for n in 1..=steps {
        let eps = sim.schedule.step_at(n);
        let mut y = x.clone();
        for i in 0..m {
            let mut g = sim.objective.worker_grad(i, &x[i]);
            sim.noise.perturb(&mut g, NoiseKey { seed: sim.cfg.seed, step: n }, i);
            for c in 0..dim {
                y[i][c] = x[i][c] - eps * g[c];
            }
        }
        if n % sim.comm.period() == 0 {
            let w = sim.comm.matrix().entries();
            for i in 0..m {
                for c in 0..dim {
                    let mut acc = 0.0;
                    for k in 0..m {
                        acc += w[(i, k)] * y[k][c];
                    }
                    x[i][c] = acc;
                }
            }
        } else {
            x = y;
        }
        history.push(x.clone());
    }
    history
}

#[test]
fn zero_momentum_is_plain_decentralised_sgd() {
    for (kind, k) in [(MixingKind::Gossip, 3), (MixingKind::Uniform, 1)] {
        let sim = Simulation::new(config(kind, 5, k, Family::SoftNonconvex, NoiseModel::gaussian(0.2))).unwrap();
        let reference = dpsgd_reference(&sim, 1000);
        let mut state = init_state(&sim).unwrap();
        let mut scratch = Scratch::new(&sim);
        assert_eq!(rows(&state.x), reference[0]);
        for want in &reference[1..] {
            step(&mut state, &sim, &mut scratch).unwrap();
            assert_eq!(&rows(&state.x), want, "{kind:?} diverged at n = {}", state.n);
        }
    }
}

#[test]
fn single_worker_is_centralised_heavy_ball() {
    for kind in [MixingKind::Identity, MixingKind::Uniform] {
        let mut cfg = config(kind, 1, 1, Family::Logistic, NoiseModel::rademacher(0.1));
        cfg.alpha = 0.9;
        let sim = Simulation::new(cfg).unwrap();
        let mut state = init_state(&sim).unwrap();
        let mut scratch = Scratch::new(&sim);
        let mut x = state.x.row(0).to_vec();
        let mut v = vec![0.0; x.len()];
        for n in 1..=1000u64 {
            let eps = sim.schedule.step_at(n);
            let mut g = sim.objective.worker_grad(0, &x);
            sim.noise.perturb(&mut g, NoiseKey { seed: sim.cfg.seed, step: n }, 0);
            for c in 0..x.len() {
                v[c] = 0.9 * v[c] + eps * g[c];
                x[c] -= v[c];
            }
            step(&mut state, &sim, &mut scratch).unwrap();
            assert_eq!(state.x.row(0), &x[..], "{kind:?} at n = {n}");
            assert_eq!(state.v.row(0), &v[..]);
        }
    }
}

fn flat_objective(m: usize, dim: usize) -> ObjectiveSpec {
    ObjectiveSpec::quadratic(Mat::zeros(dim, dim), vec![vec![0.0; dim]; m], 1.0).unwrap()
}

#[test]
fn mixing_conserves_the_average_without_gradients() {
    for (kind, k) in [(MixingKind::Uniform, 1), (MixingKind::Gossip, 1), (MixingKind::Gossip, 4)] {
        let mut cfg = config(kind, 6, k, Family::QuadraticConsensus, NoiseModel::NONE);
        cfg.alpha = 0.5;
        let comm = cfg.topology.build().unwrap();
        let sim = Simulation::with_parts(cfg, comm, flat_objective(6, 4)).unwrap();
        let mut state = init_state(&sim).unwrap();
        let start = state.average_iterate(6);
        let mut scratch = Scratch::new(&sim);
        for _ in 0..500 {
            step(&mut state, &sim, &mut scratch).unwrap();
            let avg = state.average_iterate(6);
            for (a, b) in avg.iter().zip(&start) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert!(consensus_error(&state.x, 6) < 1e-20, "{kind:?} did not reach consensus");
    }
}

#[test]
fn easgd_conserves_the_mean_over_all_rows() {
    let mut cfg = config(MixingKind::Easgd, 4, 1, Family::QuadraticConsensus, NoiseModel::NONE);
    cfg.alpha = 0.5;
    let comm = cfg.topology.build().unwrap();
    let sim = Simulation::with_parts(cfg, comm, flat_objective(4, 4)).unwrap();
    let mut state = init_state(&sim).unwrap();
    let start = state.x.mean_of_rows(5);
    let mut scratch = Scratch::new(&sim);
    for _ in 0..200 {
        step(&mut state, &sim, &mut scratch).unwrap();
        let now = state.x.mean_of_rows(5);
        for (a, b) in now.iter().zip(&start) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn momentum_buffer_is_a_discounted_gradient_sum() {
    let mut cfg = config(MixingKind::Gossip, 5, 2, Family::SoftNonconvex, NoiseModel::gaussian(0.1));
    cfg.schedule = ScheduleConfig {
        family: ScheduleFamily::Constant,
        c: Some(0.05),
        p: None,
        regime: Regime::Hitting,
    };
    let alpha = 0.8;
    cfg.alpha = alpha;
    let sim = Simulation::new(cfg).unwrap();
    let mut state = init_state(&sim).unwrap();
    let mut scratch = Scratch::new(&sim);
    let mut grads: Vec<Mat> = Vec::new();
    for n in 1..=50usize {
        step(&mut state, &sim, &mut scratch).unwrap();
        grads.push(scratch.last_gradient().clone());
        for (j, v) in state.v.as_slice().iter().enumerate() {
            let direct: f64 = (0..n)
                .map(|s| alpha.powi((n - 1 - s) as i32) * grads[s].as_slice()[j])
                .sum::<f64>()
                * 0.05;
            assert!((v - direct).abs() <= 1e-10, "n = {n}");
        }
    }
}

#[test]
fn z_identity_holds_on_noise_free_runs() {
    for alpha in [0.0, 0.5, 0.9] {
        for kind in [MixingKind::Gossip, MixingKind::Uniform] {
            let mut cfg = config(kind, 4, 2, Family::QuadraticConsensus, NoiseModel::NONE);
            cfg.alpha = alpha;
            cfg.keep_snapshots = true;
            let sim = Simulation::new(cfg).unwrap();
            let rec = run(&sim).unwrap();
            assert_eq!(rec.snapshots.len(), 1000);
            let z = z_sequence(&rec, alpha);
            let r = z.max_identity_residual.unwrap();
            assert!(r <= 1e-10, "{kind:?} alpha {alpha}: {r:e}");
            if alpha == 0.0 {
                for (zn, s) in z.z.iter().zip(&rec.snapshots) {
                    assert_eq!(zn, &s.avg_iterate);
                }
            }
        }
    }
}

#[test]
fn easgd_anchor_is_excluded_and_gradient_free() {
    let cfg = config(MixingKind::Easgd, 4, 1, Family::QuadraticConsensus, NoiseModel::gaussian(0.1));
    let sim = Simulation::new(cfg).unwrap();
    let mut state = init_state(&sim).unwrap();
    assert_eq!(state.x.rows(), 5);
    assert_eq!(state.x.row(4), &state.average_iterate(4)[..]);
    let mut scratch = Scratch::new(&sim);
    for _ in 0..20 {
        step(&mut state, &sim, &mut scratch).unwrap();
        assert!(scratch.last_gradient().row(4).iter().all(|g| *g == 0.0));
    }
    let before = average_iterate(&state.x, 4);
    state.x.row_mut(4).iter_mut().for_each(|v| *v = 123.0);
    assert_eq!(average_iterate(&state.x, 4), before);
}

#[test]
fn easgd_drives_workers_to_the_minimiser() {
    let mut cfg = config(MixingKind::Easgd, 4, 1, Family::QuadraticConsensus, NoiseModel::NONE);
    cfg.objective.heterogeneity = 0.0;
    cfg.schedule = ScheduleConfig {
        family: ScheduleFamily::Constant,
        c: Some(0.5),
        p: None,
        regime: Regime::Hitting,
    };
    cfg.alpha = 0.5;
    cfg.horizon = 2000;
    cfg.grid = RecordGrid::Geometric { per_decade: 2 };
    let rec = run(&Simulation::new(cfg).unwrap()).unwrap();
    let last = rec.rows.last().unwrap();
    assert!(last.grad_norm_sq < 1e-20, "{}", last.grad_norm_sq);
    assert!(last.consensus_err < 1e-20);
}

#[test]
fn identical_workers_stay_in_consensus() {
    let mut cfg = config(MixingKind::Uniform, 5, 1, Family::SoftNonconvex, NoiseModel::NONE);
    cfg.objective.heterogeneity = 0.0;
    cfg.init = InitPolicy::RandomBox;
    cfg.alpha = 0.5;
    let sim = Simulation::new(cfg.clone()).unwrap();
    let mut state = init_state(&sim).unwrap();
    let mut scratch = Scratch::new(&sim);
    for _ in 0..300 {
        step(&mut state, &sim, &mut scratch).unwrap();
        for i in 1..5 {
            assert_eq!(state.x.row(i), state.x.row(0));
        }
    }

    cfg.topology.kind = MixingKind::Gossip;
    cfg.topology.neighbor_weight = Some(0.25);
    let rec = run(&Simulation::new(cfg).unwrap()).unwrap();
    assert!(rec.rows.iter().all(|r| r.consensus_err <= 1e-24));
}

#[test]
fn init_policies() {
    let mut cfg = config(MixingKind::Uniform, 3, 1, Family::QuadraticConsensus, NoiseModel::NONE);
    cfg.objective.box_radius = 0.25;
    let sim = Simulation::new(cfg.clone()).unwrap();
    let a = init_state(&sim).unwrap();
    assert_eq!(a, init_state(&sim).unwrap());
    assert!(a.x.as_slice().iter().all(|v| v.abs() <= 0.25));
    assert!(consensus_error(&a.x, 3) > 0.0);
    assert!(a.v.as_slice().iter().all(|v| *v == 0.0));

    cfg.init = InitPolicy::RandomBox;
    let b = init_state(&Simulation::new(cfg.clone()).unwrap()).unwrap();
    assert!((1..3).all(|i| b.x.row(i) == b.x.row(0)));
    assert!(b.x.as_slice().iter().all(|v| v.abs() <= 0.25));

    cfg.init = InitPolicy::ZeroConsensus;
    let c = init_state(&Simulation::new(cfg).unwrap()).unwrap();
    assert!(c.x.as_slice().iter().all(|v| *v == 0.0));
}

#[test]
fn runs_are_deterministic_in_the_seed() {
    let mut cfg = config(MixingKind::Gossip, 4, 2, Family::SoftNonconvex, NoiseModel::gaussian(0.3));
    cfg.alpha = 0.5;
    cfg.grid = RecordGrid::Geometric { per_decade: 5 };
    let sim = Simulation::new(cfg).unwrap();
    let a = run(&sim).unwrap().without_timing();
    let b = run(&sim).unwrap().without_timing();
    assert_eq!(a, b);
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    let c = run(&sim.with_seed(22)).unwrap().without_timing();
    assert_ne!(a.rows, c.rows);
}

#[test]
fn horizon_one_records_the_start_only() {
    let mut cfg = config(MixingKind::Uniform, 2, 1, Family::QuadraticConsensus, NoiseModel::NONE);
    cfg.horizon = 1;
    let rec = run(&Simulation::new(cfg).unwrap()).unwrap();
    assert_eq!(rec.rows.len(), 1);
    assert_eq!(rec.rows[0].n, 1);
}

#[test]
fn record_lines_carry_the_fixed_fields() {
    let mut cfg = config(MixingKind::Uniform, 2, 1, Family::SoftNonconvex, NoiseModel::NONE);
    cfg.horizon = 3;
    let rec = run(&Simulation::new(cfg).unwrap()).unwrap();
    for line in rec.to_jsonl().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let obj = v.as_object().unwrap();
        for key in ["n", "eps", "grad_norm_sq", "loss_avg_iterate", "consensus_err", "u_v_norm", "z_subopt", "wallclock_us"] {
            assert!(obj.contains_key(key), "missing {key}");
        }
        assert!(obj["z_subopt"].is_null());
    }
}

#[test]
fn divergence_is_reported_with_its_step() {
    let mut cfg = config(MixingKind::Uniform, 2, 1, Family::QuadraticConsensus, NoiseModel::NONE);
    cfg.schedule = ScheduleConfig {
        family: ScheduleFamily::Constant,
        c: Some(25.0),
        p: None,
        regime: Regime::Hitting,
    };
    cfg.init = InitPolicy::RandomBox;
    match run(&Simulation::new(cfg).unwrap()) {
        Err(Error::NumericalDivergence { step, .. }) => assert!(step > 1 && step < 1000),
        other => panic!("expected divergence, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn z_identity_for_any_momentum(alpha in 0.0f64..0.95, seed in 0u64..1000, k in 1u64..4) {
        let mut cfg = config(MixingKind::Gossip, 3, k, Family::Logistic, NoiseModel::gaussian(0.2));
        cfg.alpha = alpha;
        cfg.seed = seed;
        cfg.horizon = 200;
        cfg.keep_snapshots = true;
        let rec = run(&Simulation::new(cfg).unwrap()).unwrap();
        let z = z_sequence(&rec, alpha);
        prop_assert!(z.max_identity_residual.unwrap() <= 1e-10);
    }

    #[test]
    fn ring_mixing_preserves_the_average(seed in 0u64..1000, m in 3usize..9) {
        let mut cfg = config(MixingKind::Gossip, m, 1, Family::QuadraticConsensus, NoiseModel::NONE);
        cfg.seed = seed;
        let comm = cfg.topology.build().unwrap();
        let sim = Simulation::with_parts(cfg, comm, flat_objective(m, 4)).unwrap();
        let mut state = init_state(&sim).unwrap();
        let start = state.average_iterate(m);
        let mut scratch = Scratch::new(&sim);
        for _ in 0..50 {
            step(&mut state, &sim, &mut scratch).unwrap();
        }
        for (a, b) in state.average_iterate(m).iter().zip(&start) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
