//! Last-iterate rate envelope `E[g(uᵀX_T) - g(θ*)] ~ ln T / √T`.

use crate::engine::Simulation;
use crate::error::{Error, Result};
use crate::schedules::ScheduleFamily;

use super::stats::least_squares;
use super::EnsembleStats;

/// A slope inside this range is read as consistent with the envelope.
pub const RATE_SLOPE_RANGE: (f64, f64) = (0.7, 1.3);
pub const RATE_R2_MIN: f64 = 0.9;

/// Which suboptimality is regressed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RateTarget {
    /// `g(uᵀX_T) - g(θ*)`
    #[default]
    AveragedIterate,
    /// `g(z_T) - g(θ*)`
    ZSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateFit {
    pub t_grid: Vec<u64>,
    pub subopt: Vec<f64>,
    pub subopt_stderr: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl RateFit {
    pub fn consistent(&self) -> bool {
        self.slope >= RATE_SLOPE_RANGE.0 && self.slope <= RATE_SLOPE_RANGE.1 && self.r2 >= RATE_R2_MIN
    }

    /// Geometric mean of `subopt · √T / ln T` over the grid.
    pub fn prefactor(&self) -> f64 {
        let logs: f64 = self
            .t_grid
            .iter()
            .zip(&self.subopt)
            .map(|(&t, &s)| (s * (t as f64).sqrt() / (t as f64).ln()).ln())
            .sum();
        (logs / self.t_grid.len() as f64).exp()
    }
}

/// `ln(ln T / √T)`
fn envelope_log(t: u64) -> f64 {
    let t = t as f64;
    (t.ln() / t.sqrt()).ln()
}

/// Regresses `ln subopt` on `ln(ln T / √T)`.
pub fn fit_rate_curve(t_grid: &[u64], subopt: &[f64], subopt_stderr: &[f64]) -> Result<RateFit> {
    if t_grid.len() < 2 || t_grid.len() != subopt.len() {
        return Err(Error::InsufficientSamples(
            "rate fit needs at least two grid points".into(),
        ));
    }
    if let Some((t, s)) = t_grid.iter().zip(subopt).find(|(_, s)| !(**s > 0.0)) {
        return Err(Error::InsufficientSamples(format!(
            "suboptimality at T = {t} is {s}, cannot take its logarithm"
        )));
    }
    if t_grid.iter().any(|&t| t < 2) {
        return Err(Error::BadParam("rate fit needs T >= 2".into()));
    }
    let x: Vec<f64> = t_grid.iter().map(|&t| envelope_log(t)).collect();
    let y: Vec<f64> = subopt.iter().map(|s| s.ln()).collect();
    let fit = least_squares(&x, &y);
    Ok(RateFit {
        t_grid: t_grid.to_vec(),
        subopt: subopt.to_vec(),
        subopt_stderr: subopt_stderr.to_vec(),
        slope: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
    })
}

/// Rate experiments need a convex objective with known minimiser and the
/// `√m/√n` schedule.
pub fn check_rate_regime(sim: &Simulation) -> Result<()> {
    if sim.schedule.family() != ScheduleFamily::RateLaw {
        return Err(Error::BadRegime(
            "rate fits require the rate-law schedule ε_n = √m/√n".into(),
        ));
    }
    if !sim.objective.is_convex() || sim.objective.g_star().is_none() {
        return Err(Error::BadRegime(
            "rate fits require a convex objective with known minimiser".into(),
        ));
    }
    Ok(())
}

pub fn rate_fit(
    stats: &EnsembleStats,
    t_grid: &[u64],
    sim: &Simulation,
    target: RateTarget,
) -> Result<RateFit> {
    check_rate_regime(sim)?;
    let g_star = sim.objective.g_star().expect("checked above");
    let (means, errs) = match target {
        RateTarget::AveragedIterate => (stats.mean_loss.clone(), stats.stderr_loss.clone()),
        RateTarget::ZSequence => {
            let m = stats.mean_z_subopt.clone().ok_or_else(|| {
                Error::BadRegime("records carry no z-sequence suboptimality".into())
            })?;
            // Already centred at g(θ*).
            let m = m.into_iter().map(|v| v + g_star).collect();
            (m, stats.stderr_z_subopt.clone().unwrap_or_default())
        }
    };
    let mut subopt = Vec::with_capacity(t_grid.len());
    let mut se = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let j = stats.index_of(t).ok_or_else(|| {
            Error::GridMismatch(format!("T = {t} is not on the recorded grid"))
        })?;
        subopt.push(means[j] - g_star);
        se.push(errs.get(j).copied().unwrap_or(f64::NAN));
    }
    fit_rate_curve(t_grid, &subopt, &se)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MScalingRow {
    pub m: usize,
    pub prefactor: f64,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MScalingTable {
    pub rows: Vec<MScalingRow>,
    /// `Some(ok)` when at least two worker counts `m ≥ 4` are present.
    pub monotone_from_four: Option<bool>,
}

/// Fitted prefactors by worker count, and whether they are non-decreasing
/// in `m` for `m ≥ 4`.
pub fn m_scaling_check(fits: &[(usize, RateFit)]) -> MScalingTable {
    let mut rows: Vec<MScalingRow> = fits
        .iter()
        .map(|(m, f)| MScalingRow {
            m: *m,
            prefactor: f.prefactor(),
            slope: f.slope,
        })
        .collect();
    rows.sort_by_key(|r| r.m);
    let large: Vec<&MScalingRow> = rows.iter().filter(|r| r.m >= 4).collect();
    let monotone_from_four = (large.len() >= 2)
        .then(|| large.windows(2).all(|w| w[1].prefactor >= w[0].prefactor));
    MScalingTable {
        rows,
        monotone_from_four,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometric(lo: u32, hi: u32) -> Vec<u64> {
        (lo..=hi).map(|e| 10u64.pow(e)).collect()
    }

    #[test]
    fn exact_envelope_has_unit_slope() {
        let t = geometric(2, 6);
        let s: Vec<f64> = t
            .iter()
            .map(|&t| 3.0 * (t as f64).ln() / (t as f64).sqrt())
            .collect();
        let f = fit_rate_curve(&t, &s, &vec![0.0; t.len()]).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-6);
        assert!(f.consistent());
        assert!((f.prefactor() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn inverse_t_is_flagged_inconsistent() {
        let t = geometric(2, 6);
        let s: Vec<f64> = t.iter().map(|&t| 5.0 / t as f64).collect();
        let f = fit_rate_curve(&t, &s, &vec![0.0; t.len()]).unwrap();
        // Independent two-point estimate of the same slope.
        let (a, b) = (t[0] as f64, t[4] as f64);
        let chord = ((1.0 / b).ln() - (1.0 / a).ln())
            / ((b.ln() / b.sqrt()).ln() - (a.ln() / a.sqrt()).ln());
        assert!(f.slope > RATE_SLOPE_RANGE.1 && chord > RATE_SLOPE_RANGE.1);
        assert!(!f.consistent());
    }

    #[test]
    fn non_positive_suboptimality_rejected() {
        assert!(fit_rate_curve(&[100, 1000], &[0.1, -0.01], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn scaling_table_cases() {
        let t = geometric(2, 4);
        let mk = |c: f64| {
            let s: Vec<f64> = t.iter().map(|&t| c * (t as f64).ln() / (t as f64).sqrt()).collect();
            fit_rate_curve(&t, &s, &vec![0.0; t.len()]).unwrap()
        };
        let single = m_scaling_check(&[(4, mk(1.0))]);
        assert_eq!(single.rows.len(), 1);
        assert_eq!(single.monotone_from_four, None);

        let same = m_scaling_check(&[(4, mk(1.0)), (8, mk(1.0))]);
        assert_eq!(same.rows[0].prefactor, same.rows[1].prefactor);
        assert_eq!(same.monotone_from_four, Some(true));

        let growing = m_scaling_check(&[(16, mk(4.0)), (1, mk(1.0)), (4, mk(2.0))]);
        assert_eq!(growing.rows.iter().map(|r| r.m).collect::<Vec<_>>(), vec![1, 4, 16]);
        assert_eq!(growing.monotone_from_four, Some(true));
        let shrinking = m_scaling_check(&[(4, mk(2.0)), (16, mk(1.0))]);
        assert_eq!(shrinking.monotone_from_four, Some(false));
    }
}
