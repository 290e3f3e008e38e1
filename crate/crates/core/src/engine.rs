//! The distributed momentum iteration.
//!
//! Rows of `X` are worker parameters (plus the anchor row for EASGD). Each
//! step evaluates stochastic gradients at the current `X_n`, folds them into
//! the momentum buffer, and mixes `X_n - v_n`. The buffer itself is never
//! mixed.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, norm_sq, Mat};
use crate::objectives::{NoiseKey, NoiseModel, ObjectiveConfig, ObjectiveSpec};
use crate::rng::{stream, Purpose};
use crate::schedules::{ScheduleConfig, StepSchedule};
use crate::topology::{CommSchedule, TopologyConfig};

pub const DEFAULT_GUARD: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Every worker starts at the origin.
    #[default]
    ZeroConsensus,
    /// One uniform point in the box, shared by all workers.
    RandomBox,
    /// Independent uniform points in the box, one per worker.
    PerWorkerRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
#[derive(Default)]
pub enum RecordGrid {
    /// `n = 1`, every multiple of `record_every`, and the horizon.
    #[default]
    Linear,
    /// `n = 1`, `round(10^(j / per_decade))`, and the horizon.
    Geometric { per_decade: u32 },
}


impl RecordGrid {
    pub fn points(&self, horizon: u64, record_every: u64) -> Vec<u64> {
        let mut pts = vec![1u64];
        match *self {
            RecordGrid::Linear => {
                let mut n = record_every;
                while n <= horizon {
                    pts.push(n);
                    n += record_every;
                }
            }
            RecordGrid::Geometric { per_decade } => {
                let per_decade = per_decade.max(1) as f64;
                let mut j = 1u32;
                loop {
                    let n = 10f64.powf(j as f64 / per_decade).round() as u64;
                    if n > horizon {
                        break;
                    }
                    pts.push(n);
                    j += 1;
                }
            }
        }
        pts.push(horizon);
        pts.sort_unstable();
        pts.dedup();
        pts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub topology: TopologyConfig,
    pub objective: ObjectiveConfig,
    pub schedule: ScheduleConfig,
    pub alpha: f64,
    pub horizon: u64,
    pub seed: u64,
    pub record_every: u64,
    #[serde(default)]
    pub grid: RecordGrid,
    #[serde(default)]
    pub init: InitPolicy,
    #[serde(default = "default_guard")]
    pub guard: f64,
    /// Keep per-step averaged iterates and averaged noisy gradients.
    #[serde(default)]
    pub keep_snapshots: bool,
    /// Record per-worker `‖∇g_i(x⁽ⁱ⁾)‖²` alongside the averaged quantities.
    #[serde(default)]
    pub track_workers: bool,
}

fn default_guard() -> f64 {
    DEFAULT_GUARD
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::BadConfig(format!(
                "alpha must lie in [0, 1), got {}",
                self.alpha
            )));
        }
        if self.horizon == 0 {
            return Err(Error::BadConfig("horizon must be >= 1".into()));
        }
        if self.record_every == 0 || self.record_every > self.horizon {
            return Err(Error::BadConfig(format!(
                "record_every must lie in [1, horizon], got {}",
                self.record_every
            )));
        }
        if self.topology.m != self.objective.m {
            return Err(Error::BadConfig(format!(
                "topology has m = {} but objective has m = {}",
                self.topology.m, self.objective.m
            )));
        }
        if !(self.guard > 0.0) {
            return Err(Error::BadConfig("guard must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a run needs that is derived once from its config.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub cfg: RunConfig,
    pub comm: CommSchedule,
    pub objective: ObjectiveSpec,
    pub schedule: StepSchedule,
    pub noise: NoiseModel,
}

impl Simulation {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let comm = cfg.topology.build()?;
        let objective = cfg.objective.build()?;
        Self::with_parts(cfg, comm, objective)
    }

    /// Reuses an already-built objective (the logistic minimiser is costly).
    pub fn with_parts(cfg: RunConfig, comm: CommSchedule, objective: ObjectiveSpec) -> Result<Self> {
        cfg.validate()?;
        if objective.workers() != comm.matrix().workers() {
            return Err(Error::BadConfig(format!(
                "objective has {} workers but mixing matrix has {}",
                objective.workers(),
                comm.matrix().workers()
            )));
        }
        let schedule = cfg.schedule.build(cfg.topology.m)?;
        let noise = cfg.objective.noise;
        Ok(Self {
            cfg,
            comm,
            objective,
            schedule,
            noise,
        })
    }

    pub fn workers(&self) -> usize {
        self.objective.workers()
    }

    pub fn rows(&self) -> usize {
        self.comm.matrix().dim()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.cfg.seed = seed;
        s
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        let mut s = self.clone();
        s.cfg.alpha = alpha;
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub x: Mat,
    pub v: Mat,
    pub n: u64,
    pub alpha: f64,
    pub max_u_norm: f64,
    /// `uᵀX_{n-1}`, equal to `uᵀX_1` at `n = 1`.
    pub prev_avg: Vec<f64>,
}

impl SimState {
    pub fn average_iterate(&self, workers: usize) -> Vec<f64> {
        average_iterate(&self.x, workers)
    }
}

/// `uᵀX` over the first `workers` rows. An EASGD anchor row is excluded.
pub fn average_iterate(x: &Mat, workers: usize) -> Vec<f64> {
    x.mean_of_rows(workers)
}

/// `Σ_i ‖x⁽ⁱ⁾ - x̄‖²` over worker rows.
pub fn consensus_error(x: &Mat, workers: usize) -> f64 {
    let avg = x.mean_of_rows(workers);
    (0..workers)
        .map(|i| {
            x.row(i)
                .iter()
                .zip(&avg)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

pub fn init_state(sim: &Simulation) -> Result<SimState> {
    let m = sim.workers();
    let d = sim.rows();
    let n_dim = sim.objective.dim();
    if sim.cfg.objective.dim != n_dim || d < m {
        return Err(Error::BadConfig("state dimensions disagree with objective".into()));
    }
    let r = sim.objective.box_radius();
    let mut x = Mat::zeros(d, n_dim);
    match sim.cfg.init {
        InitPolicy::ZeroConsensus => {}
        InitPolicy::RandomBox => {
            let mut rng = stream(sim.cfg.seed, Purpose::Init, 0, 0);
            let p = sim.objective.sample_box(&mut rng, r);
            for i in 0..m {
                x.row_mut(i).copy_from_slice(&p);
            }
        }
        InitPolicy::PerWorkerRandom => {
            for i in 0..m {
                let mut rng = stream(sim.cfg.seed, Purpose::Init, 1 + i as u64, 0);
                let p = sim.objective.sample_box(&mut rng, r);
                x.row_mut(i).copy_from_slice(&p);
            }
        }
    }
    let avg = average_iterate(&x, m);
    for i in m..d {
        x.row_mut(i).copy_from_slice(&avg);
    }
    Ok(SimState {
        v: Mat::zeros(d, n_dim),
        n: 1,
        alpha: sim.cfg.alpha,
        max_u_norm: norm(&avg),
        prev_avg: avg,
        x,
    })
}

/// Reusable buffers for [`step`].
#[derive(Clone, Debug)]
pub struct Scratch {
    grad: Mat,
    diff: Mat,
}

impl Scratch {
    pub fn new(sim: &Simulation) -> Self {
        Self {
            grad: Mat::zeros(sim.rows(), sim.objective.dim()),
            diff: Mat::zeros(sim.rows(), sim.objective.dim()),
        }
    }

    /// `G(X_n, ξ_n)` from the most recent step.
    pub fn last_gradient(&self) -> &Mat {
        &self.grad
    }
}

/// Advances `state` from `X_n` to `X_{n+1}`.
pub fn step(state: &mut SimState, sim: &Simulation, scratch: &mut Scratch) -> Result<()> {
    let n = state.n;
    let eps = sim.schedule.step_at(n);
    let m = sim.workers();
    sim.objective.grad_noisy_into(
        &sim.noise,
        &state.x,
        NoiseKey {
            seed: sim.cfg.seed,
            step: n,
        },
        &mut scratch.grad,
    );
    let alpha = state.alpha;
    for ((v, g), (x, dx)) in state
        .v
        .as_mut_slice()
        .iter_mut()
        .zip(scratch.grad.as_slice())
        .zip(state.x.as_slice().iter().zip(scratch.diff.as_mut_slice()))
    {
        *v = alpha * *v + eps * g;
        *dx = x - *v;
    }
    state.prev_avg = average_iterate(&state.x, m);
    match sim.comm.at(n) {
        Some(w) => w.entries().matmul_into(&scratch.diff, &mut state.x),
        None => std::mem::swap(&mut state.x, &mut scratch.diff),
    }
    state.n = n + 1;

    if !state.x.is_finite() || !state.v.is_finite() {
        return Err(Error::NumericalDivergence {
            step: n,
            reason: "non-finite parameter or momentum entry".into(),
        });
    }
    let u_norm = norm(&average_iterate(&state.x, m));
    state.max_u_norm = state.max_u_norm.max(u_norm);
    if u_norm > sim.cfg.guard {
        return Err(Error::NumericalDivergence {
            step: n,
            reason: format!("‖uᵀX‖ = {u_norm:e} exceeds guard {:e}", sim.cfg.guard),
        });
    }
    Ok(())
}

/// One recorded measurement, serialised as a line of the record stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub n: u64,
    pub eps: f64,
    pub grad_norm_sq: f64,
    pub loss_avg_iterate: f64,
    pub consensus_err: f64,
    pub u_v_norm: f64,
    pub z_subopt: Option<f64>,
    pub wallclock_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker_grad_norm_sq: Option<Vec<f64>>,
}

/// Per-step averaged quantities kept for the z-sequence diagnostic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub n: u64,
    pub eps: f64,
    /// `uᵀX_n`
    pub avg_iterate: Vec<f64>,
    /// `uᵀG(X_n, ξ_n)`; empty at the final recorded step.
    pub avg_gradient: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub alpha: f64,
    pub rows: Vec<RecordRow>,
    pub snapshots: Vec<Snapshot>,
    pub max_u_norm: f64,
}

impl TrajectoryRecord {
    pub fn grid(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.n).collect()
    }

    pub fn horizon(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.n)
    }

    /// Copy with every timing field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.rows.iter_mut().for_each(|r| r.wallclock_us = 0);
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r).expect("record rows serialise"));
            s.push('\n');
        }
        s
    }
}

fn measure(sim: &Simulation, state: &SimState, started: Instant) -> RecordRow {
    let m = sim.workers();
    let obj = &sim.objective;
    let avg = state.average_iterate(m);
    let grad = obj.full_grad(&avg);
    let v_avg = average_iterate(&state.v, m);
    let z_subopt = obj.g_star().map(|g_star| {
        let z = z_point(&avg, &state.prev_avg, state.alpha);
        obj.eval_loss(&z) - g_star
    });
    let worker_grad_norm_sq = sim.cfg.track_workers.then(|| {
        (0..m)
            .map(|i| norm_sq(&obj.worker_grad(i, state.x.row(i))))
            .collect()
    });
    RecordRow {
        n: state.n,
        eps: sim.schedule.step_at(state.n),
        grad_norm_sq: norm_sq(&grad),
        loss_avg_iterate: obj.eval_loss(&avg),
        consensus_err: consensus_error(&state.x, m),
        u_v_norm: norm(&v_avg),
        z_subopt,
        wallclock_us: started.elapsed().as_micros() as u64,
        worker_grad_norm_sq,
    }
}

/// `z_n = (uᵀX_n - α uᵀX_{n-1}) / (1 - α)`.
pub fn z_point(avg: &[f64], prev_avg: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 0.0 {
        return avg.to_vec();
    }
    avg.iter()
        .zip(prev_avg)
        .map(|(a, p)| (a - alpha * p) / (1.0 - alpha))
        .collect()
}

/// Runs `horizon - 1` steps, measuring `X_1, …, X_horizon` on the grid.
pub fn run(sim: &Simulation) -> Result<TrajectoryRecord> {
    let started = Instant::now();
    let cfg = &sim.cfg;
    let grid = cfg.grid.points(cfg.horizon, cfg.record_every);
    let mut next = grid.iter().copied().peekable();
    let mut state = init_state(sim)?;
    let mut scratch = Scratch::new(sim);
    let m = sim.workers();
    let mut rec = TrajectoryRecord {
        seed: cfg.seed,
        alpha: cfg.alpha,
        ..Default::default()
    };
    loop {
        let n = state.n;
        if next.peek() == Some(&n) {
            next.next();
            rec.rows.push(measure(sim, &state, started));
        }
        if n >= cfg.horizon {
            if cfg.keep_snapshots {
                rec.snapshots.push(Snapshot {
                    n,
                    eps: sim.schedule.step_at(n),
                    avg_iterate: state.average_iterate(m),
                    avg_gradient: Vec::new(),
                });
            }
            break;
        }
        let avg_before = cfg.keep_snapshots.then(|| state.average_iterate(m));
        step(&mut state, sim, &mut scratch)?;
        if let Some(avg_iterate) = avg_before {
            rec.snapshots.push(Snapshot {
                n,
                eps: sim.schedule.step_at(n),
                avg_iterate,
                avg_gradient: average_iterate(scratch.last_gradient(), m),
            });
        }
    }
    rec.max_u_norm = state.max_u_norm;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{Family, NoiseKind};
    use crate::schedules::{Regime, ScheduleFamily};
    use crate::topology::MixingKind;

    pub(crate) fn scalar_cfg(alpha: f64, eps: f64, horizon: u64) -> RunConfig {
        RunConfig {
            topology: TopologyConfig {
                kind: MixingKind::Uniform,
                m: 1,
                k: 1,
                beta: None,
                neighbor_weight: None,
            },
            objective: ObjectiveConfig {
                family: Family::QuadraticConsensus,
                dim: 1,
                m: 1,
                heterogeneity: 0.0,
                noise: NoiseModel::NONE,
                box_radius: 1.0,
                dataset_seed: None,
                min_curvature: None,
            },
            schedule: ScheduleConfig {
                family: ScheduleFamily::Constant,
                c: Some(eps),
                p: None,
                regime: Regime::Hitting,
            },
            alpha,
            horizon,
            seed: 1,
            record_every: 1,
            grid: RecordGrid::Linear,
            init: InitPolicy::ZeroConsensus,
            guard: DEFAULT_GUARD,
            keep_snapshots: true,
            track_workers: false,
        }
    }

    /// `g(x) = ½x²` with the state started at `x₁ = 1`.
    fn scalar_sim(alpha: f64, eps: f64) -> (Simulation, SimState) {
        let cfg = scalar_cfg(alpha, eps, 10);
        let comm = cfg.topology.build().unwrap();
        let obj = ObjectiveSpec::quadratic(Mat::identity(1), vec![vec![0.0]], 1.0).unwrap();
        let sim = Simulation::with_parts(cfg, comm, obj).unwrap();
        let mut st = init_state(&sim).unwrap();
        st.x[(0, 0)] = 1.0;
        (sim, st)
    }

    #[test]
    fn one_plain_gradient_step() {
        let (sim, mut st) = scalar_sim(0.0, 0.5);
        let mut scratch = Scratch::new(&sim);
        step(&mut st, &sim, &mut scratch).unwrap();
        assert_eq!(st.x[(0, 0)], 0.5);
        assert_eq!(st.n, 2);
    }

    #[test]
    fn heavy_ball_hand_iteration() {
        let (sim, mut st) = scalar_sim(0.9, 0.5);
        let mut scratch = Scratch::new(&sim);
        step(&mut st, &sim, &mut scratch).unwrap();
        assert!((st.v[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((st.x[(0, 0)] - 0.5).abs() < 1e-15);
        step(&mut st, &sim, &mut scratch).unwrap();
        assert!((st.v[(0, 0)] - 0.70).abs() < 1e-15);
        assert!((st.x[(0, 0)] + 0.20).abs() < 1e-15);
    }

    #[test]
    fn momentum_buffer_starts_at_zero() {
        let sim = Simulation::new(scalar_cfg(0.5, 0.1, 5)).unwrap();
        let st = init_state(&sim).unwrap();
        assert!(st.v.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(st.n, 1);
    }

    #[test]
    fn horizon_one_records_only_the_start() {
        let sim = Simulation::new(scalar_cfg(0.5, 0.1, 1)).unwrap();
        let rec = run(&sim).unwrap();
        assert_eq!(rec.grid(), vec![1]);
    }

    #[test]
    fn averaging_examples() {
        let x = Mat::from_rows(&[vec![0.0], vec![2.0]]);
        assert_eq!(average_iterate(&x, 2), vec![1.0]);
        let w = vec![0.25, -1.5];
        let same = Mat::from_rows(&[w.clone(), w.clone(), w.clone()]);
        assert_eq!(average_iterate(&same, 3), w);
        let anchored = Mat::from_rows(&[vec![1.0], vec![3.0], vec![1000.0]]);
        assert_eq!(average_iterate(&anchored, 2), vec![2.0]);
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(RecordGrid::Linear.points(10, 3), vec![1, 3, 6, 9, 10]);
        assert_eq!(
            RecordGrid::Geometric { per_decade: 1 }.points(1000, 1),
            vec![1, 10, 100, 1000]
        );
        let g = RecordGrid::Geometric { per_decade: 4 }.points(100_000, 1);
        assert!(g.contains(&100) && g.contains(&100_000));
    }

    #[test]
    fn config_validation() {
        let mut cfg = scalar_cfg(1.0, 0.1, 5);
        assert!(matches!(cfg.validate(), Err(Error::BadConfig(_))));
        cfg.alpha = 0.5;
        cfg.record_every = 6;
        assert!(cfg.validate().is_err());
        cfg.record_every = 1;
        cfg.objective.m = 2;
        assert!(matches!(Simulation::new(cfg), Err(Error::BadConfig(_))));
    }

    #[test]
    fn guard_trips_on_blow_up() {
        let mut cfg = scalar_cfg(0.0, 5.0, 50);
        cfg.init = InitPolicy::RandomBox;
        cfg.guard = 1e3;
        let err = run(&Simulation::new(cfg).unwrap()).unwrap_err();
        assert!(matches!(err, Error::NumericalDivergence { .. }), "{err}");
    }

    #[test]
    fn noisy_runs_are_seed_determined() {
        let mut cfg = scalar_cfg(0.5, 0.1, 30);
        cfg.objective.noise = NoiseModel {
            kind: NoiseKind::Gaussian,
            scale: 0.3,
        };
        let a = run(&Simulation::new(cfg.clone()).unwrap()).unwrap();
        let b = run(&Simulation::new(cfg.clone()).unwrap()).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
        cfg.seed = 2;
        let c = run(&Simulation::new(cfg).unwrap()).unwrap();
        assert_ne!(a.without_timing().rows, c.without_timing().rows);
    }
}
