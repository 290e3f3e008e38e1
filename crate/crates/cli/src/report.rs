//! Property checks over the summary tables, rendered as `report.txt`.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use dmsgd_core::analysis::stats::{mann_whitney_less, median};
use dmsgd_core::analysis::{
    ccdf_log_slope, consensus_bound_check, m_scaling_check, tail_ccdf, HitTime,
    HittingTimeSample, RateFit, RATE_R2_MIN, RATE_SLOPE_RANGE,
};
use dmsgd_core::schedules::Regime;

use crate::campaign::{CellTiming, Failure};
use crate::config::{CampaignConfig, Cell};
use crate::tables::{EnsembleRow, HittingRow, RateRow, SCHEMA_VERSION};

pub const LIMS_EARLY: u64 = 100;
pub const LIMS_LATE: u64 = 100_000;
pub const GRAD_DECAY_MAX: f64 = 1e-2;
pub const CONSENSUS_DECAY_MAX: f64 = 1e-3;
pub const RANK_P_MAX: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
    /// Reported but never fails a run.
    Info,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
            Status::Info => "INFO",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub scope: String,
    pub status: Status,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, scope: impl Into<String>, ok: bool, detail: String) -> Self {
        Self {
            name,
            scope: scope.into(),
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
        }
    }

    fn skip(name: &'static str, scope: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            name,
            scope: scope.into(),
            status: Status::Skip,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn failed(&self) -> bool {
        self.checks.iter().any(|c| c.status == Status::Fail)
    }

    pub fn find(&self, name: &str) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.name == name).collect()
    }

    pub fn render(&self, failures: &[Failure], timings: &[CellTiming]) -> String {
        let mut s = format!("# dmsgd report schema={SCHEMA_VERSION}\n");
        for c in &self.checks {
            let _ = writeln!(s, "{} {} [{}] {}", c.status, c.name, c.scope, c.detail);
        }
        let _ = writeln!(s, "\nfailed cells: {}", failures.len());
        for f in failures {
            let seed = f.seed.map(|s| format!(" seed={s}")).unwrap_or_default();
            let _ = writeln!(s, "  cell {} [{}] {}{seed}: {}", f.cell, f.label, f.stage, f.error);
        }
        if !timings.is_empty() {
            let _ = writeln!(s, "\ncell wall-clock:");
            for t in timings {
                let _ = writeln!(s, "  cell {} [{}] {:.2} s", t.cell, t.label, t.seconds);
            }
        }
        s
    }
}

pub fn build_report(
    cfg: &CampaignConfig,
    ensemble: &[EnsembleRow],
    hitting: &[HittingRow],
    rate: &[RateRow],
) -> Report {
    let cells = cfg.cells();
    let mut checks = Vec::new();
    let mut by_cell: BTreeMap<usize, Vec<&EnsembleRow>> = BTreeMap::new();
    for r in ensemble {
        by_cell.entry(r.cell).or_default().push(r);
    }
    for cell in &cells {
        if cell.run.schedule.regime != Regime::Convergence {
            continue;
        }
        match by_cell.get(&cell.index) {
            Some(rows) => checks.extend(convergence_checks(cell, rows)),
            None => checks.push(Check::skip("lims_decay", cell.label(), "no ensemble rows")),
        }
    }
    checks.extend(hitting_checks(&cells, hitting));
    checks.extend(rate_checks(&cells, rate));
    Report { checks }
}

fn convergence_checks(cell: &Cell, rows: &[&EnsembleRow]) -> Vec<Check> {
    let at = |n: u64| rows.iter().find(|r| r.n == n);
    let (Some(early), Some(late)) = (at(LIMS_EARLY), at(LIMS_LATE)) else {
        let why = format!("grid lacks n = {LIMS_EARLY} or n = {LIMS_LATE}");
        return vec![
            Check::skip("lims_decay", cell.label(), why.clone()),
            Check::skip("consensus_bound", cell.label(), why),
        ];
    };
    let g = late.mean_grad_norm_sq / early.mean_grad_norm_sq;
    let c = late.mean_consensus / early.mean_consensus;
    let lims = Check::new(
        "lims_decay",
        cell.label(),
        g <= GRAD_DECAY_MAX && c <= CONSENSUS_DECAY_MAX,
        format!(
            "grad ratio {g:.3e} (max {GRAD_DECAY_MAX:e}), consensus ratio {c:.3e} (max {CONSENSUS_DECAY_MAX:e})"
        ),
    );

    let bound = match (cell.run.topology.build(), cell.run.schedule.build(cell.m)) {
        (Ok(comm), Ok(schedule)) => {
            let grid: Vec<u64> = rows.iter().map(|r| r.n).collect();
            let m = cell.m as f64;
            let measured: Vec<f64> = rows.iter().map(|r| r.mean_consensus / m).collect();
            let r = consensus_bound_check(
                &grid,
                &measured,
                &schedule,
                comm.matrix().lambda0(),
                comm.period(),
                cell.alpha,
            );
            Check::new(
                "consensus_bound",
                cell.label(),
                r.passed,
                format!(
                    "rho {:.6}, C {:.3e}, {} of {} points above bound, worst excess {:+.2}%",
                    r.rho,
                    r.c_fit,
                    r.violations,
                    r.checked,
                    100.0 * r.worst_excess
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => Check::new("consensus_bound", cell.label(), false, e.to_string()),
    };
    vec![lims, bound]
}

fn samples(rows: &[&HittingRow]) -> Vec<HittingTimeSample> {
    rows.iter()
        .map(|r| HittingTimeSample {
            seed: r.seed,
            a0: r.a0,
            tau: if r.censored {
                HitTime::Censored(r.tau)
            } else {
                HitTime::Hit(r.tau)
            },
            alpha: r.alpha,
            partial_sum_at_tau: r.partial_sum_at_tau,
        })
        .collect()
}

/// Groups cells that differ only in momentum, ordered by `alpha`.
fn hitting_checks(cells: &[Cell], hitting: &[HittingRow]) -> Vec<Check> {
    let mut groups: BTreeMap<(usize, usize, u64), BTreeMap<usize, Vec<&HittingRow>>> =
        BTreeMap::new();
    for r in hitting {
        let cell = &cells[r.cell];
        groups
            .entry((cell.m, cell.schedule_index, r.a0_spec.to_bits()))
            .or_default()
            .entry(r.cell)
            .or_default()
            .push(r);
    }
    let mut checks = Vec::new();
    for ((m, _, a0_bits), by_cell) in groups {
        let mut arms: Vec<(&Cell, Vec<&HittingRow>)> =
            by_cell.into_iter().map(|(c, rows)| (&cells[c], rows)).collect();
        arms.sort_by(|a, b| a.0.alpha.total_cmp(&b.0.alpha));
        let scope = format!(
            "m={m} {} a0={}",
            arms[0].0.schedule_label(),
            f64::from_bits(a0_bits)
        );
        let taus: Vec<Vec<f64>> = arms
            .iter()
            .map(|(_, rows)| rows.iter().map(|r| r.tau as f64).collect())
            .collect();
        let medians: Vec<f64> = taus.iter().map(|t| median(t)).collect();
        let censored: Vec<usize> = arms
            .iter()
            .map(|(_, rows)| rows.iter().filter(|r| r.censored).count())
            .collect();
        let mut detail = String::new();
        for (i, (cell, _)) in arms.iter().enumerate() {
            let _ = write!(
                detail,
                "alpha={}: median {} ({} censored); ",
                cell.alpha, medians[i], censored[i]
            );
        }
        if arms.len() < 2 {
            checks.push(Check::skip("hitting_median_order", scope.clone(), detail + "needs two alphas"));
            continue;
        }
        let mut ok = true;
        for i in 1..arms.len() {
            let p = mann_whitney_less(&taus[i], &taus[i - 1]).p_less;
            let ordered = medians[i] < medians[i - 1];
            ok &= ordered && p < RANK_P_MAX;
            let _ = write!(
                detail,
                "alpha {} < {}: p = {p:.2e}; ",
                arms[i].0.alpha,
                arms[i - 1].0.alpha
            );
        }
        checks.push(Check::new("hitting_median_order", scope.clone(), ok, detail.trim_end_matches("; ").to_string()));

        let mut slopes = Vec::new();
        let mut why = None;
        for (cell, rows) in &arms {
            let schedule = match cell.run.schedule.build(cell.m) {
                Ok(s) => s,
                Err(e) => {
                    why = Some(e.to_string());
                    break;
                }
            };
            match tail_ccdf(&samples(rows), &schedule) {
                Ok(t) => slopes.push((cell.alpha, ccdf_log_slope(&t), t.censored_fraction)),
                Err(e) => {
                    why = Some(format!("alpha={}: {e}", cell.alpha));
                    break;
                }
            }
        }
        if let Some(why) = why {
            checks.push(Check::skip("ccdf_slope_order", scope, why));
            continue;
        }
        let ok = slopes.windows(2).all(|w| w[1].1 < w[0].1);
        let detail = slopes
            .iter()
            .map(|(a, s, c)| format!("alpha={a}: slope {s:.4} (censored {:.1}%)", 100.0 * c))
            .collect::<Vec<_>>()
            .join("; ");
        checks.push(Check::new("ccdf_slope_order", scope, ok, detail));
    }
    checks
}

fn fit_from_rows(rows: &[&RateRow]) -> RateFit {
    RateFit {
        t_grid: rows.iter().map(|r| r.t).collect(),
        subopt: rows.iter().map(|r| r.subopt).collect(),
        subopt_stderr: rows.iter().map(|r| r.subopt_stderr).collect(),
        slope: rows[0].slope,
        intercept: rows[0].intercept,
        r2: rows[0].r2,
    }
}

fn rate_checks(cells: &[Cell], rate: &[RateRow]) -> Vec<Check> {
    let mut fits: BTreeMap<(usize, String), Vec<&RateRow>> = BTreeMap::new();
    for r in rate {
        fits.entry((r.cell, r.target.clone())).or_default().push(r);
    }
    let mut checks = Vec::new();
    let mut for_scaling: BTreeMap<(usize, u64), Vec<(usize, RateFit)>> = BTreeMap::new();
    for ((c, target), rows) in &fits {
        let cell = &cells[*c];
        let fit = fit_from_rows(rows);
        let detail = format!(
            "slope {:.4} (range [{}, {}]), r2 {:.4} (min {RATE_R2_MIN}), prefactor {:.4e}, T = {:?}",
            fit.slope,
            RATE_SLOPE_RANGE.0,
            RATE_SLOPE_RANGE.1,
            fit.r2,
            fit.prefactor(),
            fit.t_grid
        );
        if target == "averaged_iterate" {
            checks.push(Check::new("rate_slope", cell.label(), fit.consistent(), detail));
            for_scaling
                .entry((cell.schedule_index, cell.alpha.to_bits()))
                .or_default()
                .push((cell.m, fit));
        } else {
            checks.push(Check {
                name: "rate_slope_z",
                scope: cell.label(),
                status: Status::Info,
                detail,
            });
        }
    }
    for ((_, alpha_bits), fits) in for_scaling {
        if fits.len() < 2 {
            continue;
        }
        let table = m_scaling_check(&fits);
        let rows = table
            .rows
            .iter()
            .map(|r| format!("m={}: prefactor {:.4e}", r.m, r.prefactor))
            .collect::<Vec<_>>()
            .join("; ");
        let verdict = match table.monotone_from_four {
            Some(true) => "non-decreasing for m >= 4",
            Some(false) => "decreasing somewhere for m >= 4",
            None => "fewer than two m >= 4",
        };
        checks.push(Check {
            name: "m_scaling",
            scope: format!("alpha={}", f64::from_bits(alpha_bits)),
            status: Status::Info,
            detail: format!("{rows}; {verdict}"),
        });
    }
    checks
}
