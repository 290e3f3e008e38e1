//! Post-processing of trajectory ensembles.
//!
//! Everything here is a pure function of immutable records, so ensembles can
//! be reduced in parallel and in any order.

mod consensus;
mod hitting;
mod oracle;
mod rate;
pub mod stats;
mod zseq;

pub use consensus::{consensus_bound_check, consensus_bound_shape, ConsensusBoundReport};
pub use hitting::{
    ccdf_log_slope, hitting_times, tail_ccdf, CcdfRow, CcdfTable, HitMetric, HitTime,
    HittingTimeSample,
};
pub use oracle::{exhaustive_expectation, ExactExpectation, ENUMERATION_LIMIT};
pub use rate::{
    check_rate_regime, fit_rate_curve, m_scaling_check, rate_fit, MScalingRow, MScalingTable,
    RateFit, RateTarget, RATE_R2_MIN, RATE_SLOPE_RANGE,
};
pub use zseq::{z_sequence, ZSequence};

use crate::engine::TrajectoryRecord;
use crate::error::{Error, Result};
use stats::mean_stderr;

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStats {
    pub grid: Vec<u64>,
    pub seeds: usize,
    pub mean_grad_norm_sq: Vec<f64>,
    pub stderr_grad_norm_sq: Vec<f64>,
    /// `(1/n) Σ_{k≤n} E‖∇g(x̄_k)‖²` on the grid.
    pub tams: Vec<f64>,
    /// Half-width of the interpolation envelope for `tams`; zero when the
    /// grid covers every step.
    pub tams_interp_err: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub stderr_loss: Vec<f64>,
    pub mean_consensus: Vec<f64>,
    pub stderr_consensus: Vec<f64>,
    pub mean_u_v_norm: Vec<f64>,
    pub mean_z_subopt: Option<Vec<f64>>,
    pub stderr_z_subopt: Option<Vec<f64>>,
}

impl EnsembleStats {
    pub fn index_of(&self, n: u64) -> Option<usize> {
        self.grid.binary_search(&n).ok()
    }
}

fn column(records: &[TrajectoryRecord], j: usize, f: impl Fn(&crate::engine::RecordRow) -> f64) -> Vec<f64> {
    records.iter().map(|r| f(&r.rows[j])).collect()
}

pub fn ensemble(records: &[TrajectoryRecord]) -> Result<EnsembleStats> {
    if records.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "an ensemble needs at least 2 records, got {}",
            records.len()
        )));
    }
    let grid = records[0].grid();
    for (i, r) in records.iter().enumerate().skip(1) {
        if r.grid() != grid {
            return Err(Error::GridMismatch(format!(
                "record {i} (seed {}) differs from record 0",
                r.seed
            )));
        }
    }
    let len = grid.len();
    let mut out = EnsembleStats {
        grid: grid.clone(),
        seeds: records.len(),
        mean_grad_norm_sq: Vec::with_capacity(len),
        stderr_grad_norm_sq: Vec::with_capacity(len),
        tams: Vec::new(),
        tams_interp_err: Vec::new(),
        mean_loss: Vec::with_capacity(len),
        stderr_loss: Vec::with_capacity(len),
        mean_consensus: Vec::with_capacity(len),
        stderr_consensus: Vec::with_capacity(len),
        mean_u_v_norm: Vec::with_capacity(len),
        mean_z_subopt: None,
        stderr_z_subopt: None,
    };
    let has_z = records.iter().all(|r| r.rows.iter().all(|row| row.z_subopt.is_some()));
    let (mut mz, mut sz) = (Vec::new(), Vec::new());
    for j in 0..len {
        let (m, s) = mean_stderr(&column(records, j, |r| r.grad_norm_sq));
        out.mean_grad_norm_sq.push(m);
        out.stderr_grad_norm_sq.push(s);
        let (m, s) = mean_stderr(&column(records, j, |r| r.loss_avg_iterate));
        out.mean_loss.push(m);
        out.stderr_loss.push(s);
        let (m, s) = mean_stderr(&column(records, j, |r| r.consensus_err));
        out.mean_consensus.push(m);
        out.stderr_consensus.push(s);
        out.mean_u_v_norm
            .push(mean_stderr(&column(records, j, |r| r.u_v_norm)).0);
        if has_z {
            let (m, s) = mean_stderr(&column(records, j, |r| r.z_subopt.unwrap_or(f64::NAN)));
            mz.push(m);
            sz.push(s);
        }
    }
    if has_z {
        out.mean_z_subopt = Some(mz);
        out.stderr_z_subopt = Some(sz);
    }
    let (tams, err) = time_average(&grid, &out.mean_grad_norm_sq);
    out.tams = tams;
    out.tams_interp_err = err;
    Ok(out)
}

/// Running average `(1/n) Σ_{k≤n} f(k)` of a grid-sampled sequence. Exact
/// when the grid is `1, 2, …`; otherwise `f` is linearly interpolated between
/// grid points and the returned error is the gap between the monotone
/// lower/upper step-function envelopes, halved.
pub fn time_average(grid: &[u64], values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut avg = Vec::with_capacity(grid.len());
    let mut err = Vec::with_capacity(grid.len());
    if grid.is_empty() {
        return (avg, err);
    }
    // Points before the first grid entry are treated as equal to it.
    let mut sum = values[0] * grid[0] as f64;
    let mut slack = 0.0;
    avg.push(sum / grid[0] as f64);
    err.push(0.0);
    for j in 1..grid.len() {
        let (a, b) = (grid[j - 1], grid[j]);
        let (fa, fb) = (values[j - 1], values[j]);
        let width = (b - a) as f64;
        // Σ_{k=a+1}^{b} [fa + (fb - fa)(k - a)/(b - a)]
        sum += width * fa + (fb - fa) * (width + 1.0) / 2.0;
        if b - a > 1 {
            slack += 0.5 * (fb - fa).abs() * (width - 1.0);
        }
        avg.push(sum / b as f64);
        err.push(slack / b as f64);
    }
    (avg, err)
}
