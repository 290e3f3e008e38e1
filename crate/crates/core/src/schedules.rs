//! Step-size families and their Robbins–Monro classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleFamily {
    PowerLaw,
    RateLaw,
    Constant,
}

/// Which experiment a run belongs to. Rate-law and constant
/// schedules are only admissible outside the convergence regime.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    Convergence,
    Rate,
    Hitting,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSchedule {
    /// `ε_n = c / n^p`
    PowerLaw { c: f64, p: f64 },
    /// `ε_n = √m / √n`
    RateLaw { m: usize },
    /// `ε_n = c`
    Constant { c: f64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RobbinsMonro {
    pub valid: bool,
    pub reason: String,
}

impl StepSchedule {
    pub fn power_law(c: f64, p: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite() && p.is_finite()) {
            return Err(Error::BadParam(format!("power law needs c > 0, got c={c}, p={p}")));
        }
        Ok(Self::PowerLaw { c, p })
    }

    pub fn rate_law(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::BadParam("rate law needs m >= 1".into()));
        }
        Ok(Self::RateLaw { m })
    }

    pub fn constant(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::BadParam(format!("constant step needs c > 0, got {c}")));
        }
        Ok(Self::Constant { c })
    }

    pub fn family(&self) -> ScheduleFamily {
        match self {
            Self::PowerLaw { .. } => ScheduleFamily::PowerLaw,
            Self::RateLaw { .. } => ScheduleFamily::RateLaw,
            Self::Constant { .. } => ScheduleFamily::Constant,
        }
    }

    /// `ε_n` for `n >= 1`.
    #[inline]
    pub fn step_at(&self, n: u64) -> f64 {
        debug_assert!(n >= 1);
        let n = n as f64;
        match *self {
            Self::PowerLaw { c, p } => c / n.powf(p),
            Self::RateLaw { m } => (m as f64).sqrt() / n.sqrt(),
            Self::Constant { c } => c,
        }
    }

    pub fn robbins_monro_valid(&self) -> RobbinsMonro {
        let (valid, reason) = match *self {
            Self::PowerLaw { p, .. } if p > 0.5 && p <= 1.0 => {
                (true, format!("power law with p = {p} in (1/2, 1]"))
            }
            Self::PowerLaw { p, .. } if p <= 0.5 => (
                false,
                format!("power law with p = {p} <= 1/2: Σε² diverges"),
            ),
            Self::PowerLaw { p, .. } => {
                (false, format!("power law with p = {p} > 1: Σε converges"))
            }
            Self::RateLaw { .. } => (
                false,
                "rate-law schedule, rate regime only (Σε² diverges)".to_string(),
            ),
            Self::Constant { .. } => (
                false,
                "constant step: Σε² diverges (hitting-time regime only)".to_string(),
            ),
        };
        RobbinsMonro { valid, reason }
    }

    /// `Σ_{i=1}^{n} ε_i` by direct accumulation.
    pub fn partial_sum(&self, n: u64) -> f64 {
        (1..=n).map(|i| self.step_at(i)).sum()
    }

    /// Whether this schedule may be used in `regime`. Returns the waiver or
    /// failure reason.
    pub fn admissible_in(&self, regime: Regime) -> std::result::Result<Option<String>, String> {
        let rm = self.robbins_monro_valid();
        match (regime, self.family()) {
            (Regime::Convergence, _) if rm.valid => Ok(None),
            (Regime::Convergence, _) => Err(rm.reason),
            (Regime::Rate, ScheduleFamily::RateLaw) => Ok(Some(rm.reason)),
            (Regime::Rate, _) => Err("rate regime requires the rate-law schedule".into()),
            (Regime::Hitting, _) if rm.valid => Ok(None),
            (Regime::Hitting, ScheduleFamily::Constant) => Ok(Some(rm.reason)),
            (Regime::Hitting, _) => Err(format!(
                "{}; only non-increasing schedules are admissible for hitting times",
                rm.reason
            )),
        }
    }
}

/// Prefix sums of a schedule, accumulated once up to a horizon.
#[derive(Clone, Debug)]
pub struct PartialSums {
    sums: Vec<f64>,
}

impl PartialSums {
    pub fn new(schedule: &StepSchedule, horizon: u64) -> Self {
        let mut sums = Vec::with_capacity(horizon as usize + 1);
        sums.push(0.0);
        let mut acc = 0.0;
        for n in 1..=horizon {
            acc += schedule.step_at(n);
            sums.push(acc);
        }
        Self { sums }
    }

    /// `Σ_{i≤n} ε_i`; `at(0) == 0`.
    pub fn at(&self, n: u64) -> f64 {
        self.sums[n as usize]
    }

    pub fn horizon(&self) -> u64 {
        self.sums.len() as u64 - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub family: ScheduleFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default)]
    pub regime: Regime,
}

impl Default for ScheduleConfig {
    /// Decaying from 0.1 with a mid-range Robbins–Monro exponent.
    fn default() -> Self {
        Self {
            family: ScheduleFamily::PowerLaw,
            c: Some(0.1),
            p: Some(0.6),
            regime: Regime::Convergence,
        }
    }
}

impl ScheduleConfig {
    /// `m` is the worker count, used by the rate law.
    pub fn build(&self, m: usize) -> Result<StepSchedule> {
        match self.family {
            ScheduleFamily::PowerLaw => StepSchedule::power_law(
                self.c.ok_or_else(|| Error::BadConfig("power_law needs `c`".into()))?,
                self.p.ok_or_else(|| Error::BadConfig("power_law needs `p`".into()))?,
            ),
            ScheduleFamily::RateLaw => StepSchedule::rate_law(m),
            ScheduleFamily::Constant => StepSchedule::constant(
                self.c.ok_or_else(|| Error::BadConfig("constant needs `c`".into()))?,
            ),
        }
    }
}
