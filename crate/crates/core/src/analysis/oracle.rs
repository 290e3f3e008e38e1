//! Exact expectations by exhaustive enumeration of Rademacher noise.
//!
//! The recursion here is written independently of [`crate::engine::step`]:
//! plain nested vectors, a depth-first walk over the noise tree with shared
//! prefixes, and exact dyadic weights.

use crate::engine::Simulation;
use crate::error::{Error, Result};
use crate::objectives::NoiseKind;

/// Largest number of equiprobable noise sequences we will walk.
pub const ENUMERATION_LIMIT: u128 = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct ExactExpectation {
    /// `1, 2, …, H + 1`
    pub n: Vec<u64>,
    /// Exact `E‖∇g(x̄_n)‖²`.
    pub grad_norm_sq: Vec<f64>,
    pub sequences: u128,
}

struct Walk<'a> {
    sim: &'a Simulation,
    m: usize,
    d: usize,
    dim: usize,
    scale: f64,
    bits: u32,
    steps: u64,
    acc: Vec<f64>,
}

impl Walk<'_> {
    fn grad_norm_sq_at_average(&self, x: &[Vec<f64>]) -> f64 {
        let mut avg = vec![0.0; self.dim];
        for row in &x[..self.m] {
            for (a, v) in avg.iter_mut().zip(row) {
                *a += v;
            }
        }
        avg.iter_mut().for_each(|a| *a /= self.m as f64);
        let mut g = vec![0.0; self.dim];
        for i in 0..self.m {
            let gi = self.sim.objective.worker_grad(i, &avg);
            for (a, b) in g.iter_mut().zip(gi) {
                *a += b;
            }
        }
        g.iter().map(|v| (v / self.m as f64).powi(2)).sum()
    }

    /// `x`, `v` are the state at step `n`; `weight` is its probability.
    fn visit(&mut self, x: &[Vec<f64>], v: &[Vec<f64>], n: u64, weight: f64) {
        self.acc[(n - 1) as usize] += weight * self.grad_norm_sq_at_average(x);
        if n > self.steps {
            return;
        }
        let eps = self.sim.schedule.step_at(n);
        let alpha = self.sim.cfg.alpha;
        let grads: Vec<Vec<f64>> = (0..self.d)
            .map(|i| {
                if i < self.m {
                    self.sim.objective.worker_grad(i, &x[i])
                } else {
                    vec![0.0; self.dim]
                }
            })
            .collect();
        let sim = self.sim;
        let w = sim.comm.at(n).map(|w| w.entries());
        let patterns: u64 = 1 << self.bits;
        let child_weight = weight / patterns as f64;
        for pattern in 0..patterns {
            let mut nv = vec![vec![0.0; self.dim]; self.d];
            let mut y = vec![vec![0.0; self.dim]; self.d];
            for i in 0..self.d {
                for c in 0..self.dim {
                    let noise = if i < self.m {
                        let bit = (pattern >> (i * self.dim + c)) & 1;
                        if bit == 1 {
                            self.scale
                        } else {
                            -self.scale
                        }
                    } else {
                        0.0
                    };
                    nv[i][c] = alpha * v[i][c] + eps * (grads[i][c] + noise);
                    y[i][c] = x[i][c] - nv[i][c];
                }
            }
            let nx = match w {
                None => y,
                Some(w) => (0..self.d)
                    .map(|i| {
                        (0..self.dim)
                            .map(|c| (0..self.d).map(|k| w[(i, k)] * y[k][c]).sum())
                            .collect()
                    })
                    .collect(),
            };
            self.visit(&nx, &nv, n + 1, child_weight);
        }
    }
}

/// `E‖∇g(x̄_n)‖²` for `n = 1, …, steps + 1`, averaging over every
/// Rademacher sign sequence of `steps` steps (or the single deterministic
/// path when the run is noise-free). The initial state is
/// [`crate::engine::init_state`] of `sim`.
pub fn exhaustive_expectation(sim: &Simulation, steps: u64) -> Result<ExactExpectation> {
    let m = sim.workers();
    let dim = sim.objective.dim();
    let silent = sim.noise.is_silent();
    if !silent && sim.noise.kind != NoiseKind::Rademacher {
        return Err(Error::BadConfig(
            "exhaustive enumeration needs Rademacher (or no) noise".into(),
        ));
    }
    let bits = if silent { 0 } else { (m * dim) as u32 };
    let sequences = if bits == 0 {
        1u128
    } else {
        let per_step_bits = bits as u128;
        if per_step_bits * steps as u128 > 120 {
            u128::MAX
        } else {
            1u128 << (per_step_bits * steps as u128)
        }
    };
    if sequences > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            sequences,
            limit: ENUMERATION_LIMIT,
        });
    }
    let init = crate::engine::init_state(sim)?;
    let d = init.x.rows();
    let x: Vec<Vec<f64>> = (0..d).map(|i| init.x.row(i).to_vec()).collect();
    let v = vec![vec![0.0; dim]; d];
    let mut walk = Walk {
        sim,
        m,
        d,
        dim,
        scale: sim.noise.scale,
        bits,
        steps,
        acc: vec![0.0; steps as usize + 1],
    };
    walk.visit(&x, &v, 1, 1.0);
    Ok(ExactExpectation {
        n: (1..=steps + 1).collect(),
        grad_norm_sq: walk.acc,
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run, InitPolicy, RecordGrid, RunConfig};
    use crate::objectives::{Family, NoiseModel, ObjectiveConfig};
    use crate::schedules::{Regime, ScheduleConfig, ScheduleFamily};
    use crate::topology::{MixingKind, TopologyConfig};

    fn cfg(m: usize, noise: NoiseModel, steps: u64) -> RunConfig {
        RunConfig {
            topology: TopologyConfig {
                kind: MixingKind::Uniform,
                m,
                k: 2,
                beta: None,
                neighbor_weight: None,
            },
            objective: ObjectiveConfig {
                family: Family::QuadraticConsensus,
                dim: 1,
                m,
                heterogeneity: 0.5,
                noise,
                box_radius: 1.0,
                dataset_seed: Some(11),
                min_curvature: None,
            },
            schedule: ScheduleConfig {
                family: ScheduleFamily::PowerLaw,
                c: Some(0.3),
                p: Some(0.6),
                regime: Regime::Convergence,
            },
            alpha: 0.5,
            horizon: steps + 1,
            seed: 3,
            record_every: 1,
            grid: RecordGrid::Linear,
            init: InitPolicy::PerWorkerRandom,
            guard: 1e6,
            keep_snapshots: false,
            track_workers: false,
        }
    }

    #[test]
    fn silent_noise_reproduces_the_single_trajectory() {
        let sim = Simulation::new(cfg(2, NoiseModel::NONE, 6)).unwrap();
        let exact = exhaustive_expectation(&sim, 6).unwrap();
        let rec = run(&sim).unwrap();
        assert_eq!(exact.sequences, 1);
        for (row, e) in rec.rows.iter().zip(&exact.grad_norm_sq) {
            assert!((row.grad_norm_sq - e).abs() <= 1e-14 * (1.0 + e));
        }
    }

    #[test]
    fn one_step_matches_two_point_closed_form() {
        // g(x) = ½(x - b)², one worker: E(x₂ - b)² over ξ = ±s.
        let mut c = cfg(1, NoiseModel::rademacher(0.1), 1);
        c.alpha = 0.0;
        let sim = Simulation::new(c).unwrap();
        let b = sim.objective.theta_star().unwrap()[0];
        let x1 = crate::engine::init_state(&sim).unwrap().x[(0, 0)];
        let eps = sim.schedule.step_at(1);
        let closed = [0.1, -0.1]
            .iter()
            .map(|xi| {
                let x2 = x1 - eps * ((x1 - b) + xi);
                (x2 - b) * (x2 - b)
            })
            .sum::<f64>()
            / 2.0;
        let exact = exhaustive_expectation(&sim, 1).unwrap();
        assert_eq!(exact.sequences, 2);
        assert!((exact.grad_norm_sq[1] - closed).abs() < 1e-15);
    }

    #[test]
    fn enumeration_bound_is_enforced() {
        let sim = Simulation::new(cfg(2, NoiseModel::rademacher(0.1), 13)).unwrap();
        assert!(matches!(
            exhaustive_expectation(&sim, 13),
            Err(Error::TooLarge { .. })
        ));
        let mut g = cfg(2, NoiseModel::gaussian(0.1), 3);
        g.objective.noise = NoiseModel::gaussian(0.1);
        let sim = Simulation::new(g).unwrap();
        assert!(matches!(exhaustive_expectation(&sim, 3), Err(Error::BadConfig(_))));
    }
}
