//! First-passage times of the squared gradient norm below a threshold, and
//! their empirical tail.

use crate::engine::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::schedules::StepSchedule;

use super::stats::least_squares;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HitTime {
    Hit(u64),
    /// No recorded value fell below the threshold before the horizon.
    Censored(u64),
}

impl HitTime {
    /// The hit time, or the horizon for censored samples.
    pub fn value(&self) -> u64 {
        match *self {
            HitTime::Hit(n) | HitTime::Censored(n) => n,
        }
    }

    pub fn is_censored(&self) -> bool {
        matches!(self, HitTime::Censored(_))
    }
}

/// Which squared gradient norm the passage time is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HitMetric {
    /// `‖∇g(x̄_n)‖²`
    #[default]
    AveragedIterate,
    /// `‖∇g_i(x_n⁽ⁱ⁾)‖²`; needs records made with `track_workers`.
    Worker(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HittingTimeSample {
    pub seed: u64,
    pub a0: f64,
    pub tau: HitTime,
    pub alpha: f64,
    /// `Σ_{i≤τ} ε_i`
    pub partial_sum_at_tau: f64,
}

pub fn hitting_times(
    records: &[TrajectoryRecord],
    a0: f64,
    schedule: &StepSchedule,
    metric: HitMetric,
) -> Result<Vec<HittingTimeSample>> {
    if !(a0 > 0.0) {
        return Err(Error::BadParam(format!("a0 must be positive, got {a0}")));
    }
    records
        .iter()
        .map(|rec| {
            let mut tau = HitTime::Censored(rec.horizon());
            for row in &rec.rows {
                let value = match metric {
                    HitMetric::AveragedIterate => row.grad_norm_sq,
                    HitMetric::Worker(i) => row
                        .worker_grad_norm_sq
                        .as_ref()
                        .and_then(|w| w.get(i).copied())
                        .ok_or_else(|| {
                            Error::BadParam(format!("record lacks worker {i} gradient norms"))
                        })?,
                };
                if value < a0 {
                    tau = HitTime::Hit(row.n);
                    break;
                }
            }
            Ok(HittingTimeSample {
                seed: rec.seed,
                a0,
                tau,
                alpha: rec.alpha,
                partial_sum_at_tau: schedule.partial_sum(tau.value()),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CcdfRow {
    pub n: u64,
    pub partial_sum: f64,
    /// Empirical `P(τ ≥ n)`.
    pub ccdf: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcdfTable {
    pub rows: Vec<CcdfRow>,
    pub samples: usize,
    pub censored_fraction: f64,
}

pub const MIN_UNCENSORED: usize = 50;

/// Empirical `P(τ ≥ n)` for `n = 1, …, horizon`, paired with `Σ_{i≤n} ε_i`.
/// Censored samples count as `τ ≥ n` up to their horizon, and the table
/// stops at the smallest horizon among them.
pub fn tail_ccdf(samples: &[HittingTimeSample], schedule: &StepSchedule) -> Result<CcdfTable> {
    let censored = samples.iter().filter(|s| s.tau.is_censored()).count();
    let uncensored = samples.len() - censored;
    if uncensored < MIN_UNCENSORED {
        return Err(Error::InsufficientSamples(format!(
            "need at least {MIN_UNCENSORED} uncensored hitting times, got {uncensored}"
        )));
    }
    if 2 * censored > samples.len() {
        return Err(Error::InsufficientSamples(format!(
            "{censored} of {} samples are censored",
            samples.len()
        )));
    }
    let max_hit = samples.iter().map(|s| s.tau.value()).max().unwrap_or(1);
    let end = samples
        .iter()
        .filter(|s| s.tau.is_censored())
        .map(|s| s.tau.value())
        .min()
        .unwrap_or(max_hit + 1)
        .min(max_hit + 1);
    let total = samples.len() as f64;
    let mut taus: Vec<u64> = samples.iter().map(|s| s.tau.value()).collect();
    taus.sort_unstable();
    let mut rows = Vec::with_capacity(end as usize);
    let mut below = 0usize;
    let mut sum = 0.0;
    for n in 1..=end {
        while below < taus.len() && taus[below] < n {
            below += 1;
        }
        sum += schedule.step_at(n);
        rows.push(CcdfRow {
            n,
            partial_sum: sum,
            ccdf: (taus.len() - below) as f64 / total,
        });
    }
    Ok(CcdfTable {
        rows,
        samples: samples.len(),
        censored_fraction: censored as f64 / total,
    })
}

/// Least-squares slope of `ln P(τ ≥ n)` against `Σ_{i≤n} ε_i` over the rows
/// where the tail is positive.
pub fn ccdf_log_slope(table: &CcdfTable) -> f64 {
    let (x, y): (Vec<f64>, Vec<f64>) = table
        .rows
        .iter()
        .filter(|r| r.ccdf > 0.0)
        .map(|r| (r.partial_sum, r.ccdf.ln()))
        .unzip();
    if x.len() < 2 {
        return f64::NEG_INFINITY;
    }
    least_squares(&x, &y).slope
}
