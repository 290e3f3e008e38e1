//! Single-constant envelope for the consensus deviation `E‖e_iᵀX_n‖²`.
//!
//! The envelope shape is `S(n) = Σ_{t<n} ρ^{n-1-t} ε_t²` with
//! `ρ = max{λ₀^{1/k}, α₁}` and `α₁ = α² + (1 - α²)/2`. A constant `C` is fit
//! on grid points with `n ≤ H/3` (`H` the last grid point) and `C·S(n)` must
//! dominate the later points.

use crate::schedules::StepSchedule;

pub const FIT_FRACTION: f64 = 1.0 / 3.0;
pub const MAX_VIOLATION_FRACTION: f64 = 0.05;
pub const MAX_VIOLATION_MAGNITUDE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusBoundReport {
    pub rho: f64,
    pub c_fit: f64,
    pub checked: usize,
    pub violations: usize,
    /// Largest `measured / (C·S(n)) - 1` over checked points (may be negative).
    pub worst_excess: f64,
    pub passed: bool,
}

/// `α₁ = α² + α₀` with `α₀ = (1 - α²)/2`.
pub fn alpha_one(alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    a2 + (1.0 - a2) / 2.0
}

pub fn contraction_rate(lambda0: f64, k: u64, alpha: f64) -> f64 {
    lambda0.powf(1.0 / k as f64).max(alpha_one(alpha))
}

/// `S(n)` on `grid` (ascending, `n ≥ 1`).
pub fn consensus_bound_shape(grid: &[u64], schedule: &StepSchedule, rho: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len());
    let mut s = 0.0;
    let mut n = 1u64;
    for &target in grid {
        while n < target {
            let e = schedule.step_at(n);
            s = rho * s + e * e;
            n += 1;
        }
        out.push(s);
    }
    out
}

/// `measured[j]` is the ensemble mean of `‖e_iᵀX_n‖²` at `grid[j]`.
pub fn consensus_bound_check(
    grid: &[u64],
    measured: &[f64],
    schedule: &StepSchedule,
    lambda0: f64,
    k: u64,
    alpha: f64,
) -> ConsensusBoundReport {
    let rho = contraction_rate(lambda0, k, alpha);
    let shape = consensus_bound_shape(grid, schedule, rho);
    let horizon = grid.last().copied().unwrap_or(0) as f64;
    let cut = horizon * FIT_FRACTION;
    let usable: Vec<(u64, f64, f64)> = grid
        .iter()
        .zip(shape.iter().zip(measured))
        .filter(|(_, (s, _))| **s > 0.0)
        .map(|(&n, (s, m))| (n, *s, *m))
        .collect();
    let split = usable.partition_point(|(n, _, _)| (*n as f64) <= cut);
    let c_fit = usable[..split]
        .iter()
        .map(|(_, s, m)| m / s)
        .fold(0.0, f64::max);
    let rest: Vec<(f64, f64)> = usable[split..].iter().map(|(_, s, m)| (*s, *m)).collect();
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for (s, m) in &rest {
        let excess = m / (c_fit * s) - 1.0;
        worst = worst.max(excess);
        if excess > 0.0 {
            violations += 1;
        }
    }
    let checked = rest.len();
    let passed = checked > 0
        && (violations as f64) <= MAX_VIOLATION_FRACTION * checked as f64
        && worst <= MAX_VIOLATION_MAGNITUDE;
    ConsensusBoundReport {
        rho,
        c_fit,
        checked,
        violations,
        worst_excess: worst,
        passed,
    }
}
