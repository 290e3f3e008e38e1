//! The four verbs, callable in-process.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use dmsgd_core::analysis::{check_rate_regime, exhaustive_expectation};
use dmsgd_core::engine::Simulation;
use dmsgd_core::objectives::AssumptionReport;
use dmsgd_core::schedules::{PartialSums, Regime};
use serde::{Deserialize, Serialize};

use crate::campaign::{run_campaign, CampaignOutput, Failure};
use crate::chart::{ccdf_chart, grad_chart, loss_chart};
use crate::config::{schedule_label, CampaignConfig};
use crate::fsio::write_atomic;
use crate::report::{build_report, Report};
use crate::tables::{from_csv, to_csv, EnsembleRow, HittingRow, RateRow, SCHEMA_VERSION};

pub const ASSUMPTION_PROBES: usize = 1000;

pub const ENSEMBLE_CSV: &str = "ensemble.csv";
pub const HITTING_CSV: &str = "hitting.csv";
pub const RATE_CSV: &str = "ratefit.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const FAILURES_JSON: &str = "failures.json";
pub const ORACLE_JSON: &str = "oracle.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyCheck {
    pub m: usize,
    pub lambda0: Option<f64>,
    pub spectrum: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCheck {
    pub schedule: String,
    pub regime: Regime,
    pub robbins_monro_valid: bool,
    pub reason: String,
    /// Set when the regime admits the schedule despite the failed test.
    pub waiver: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub m: usize,
    pub report: Option<AssumptionReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub topologies: Vec<TopologyCheck>,
    pub schedules: Vec<ScheduleCheck>,
    pub assumptions: Vec<AssumptionCheck>,
    pub errors: Vec<String>,
}

pub fn validate(cfg: &CampaignConfig) -> ValidationReport {
    let mut errors = Vec::new();
    let mut topologies = Vec::new();
    let mut assumptions = Vec::new();
    for m in cfg.worker_counts() {
        let mut topo = cfg.topology.clone();
        topo.m = m;
        match topo.build() {
            Ok(comm) => topologies.push(TopologyCheck {
                m,
                lambda0: Some(comm.matrix().lambda0()),
                spectrum: Some(comm.matrix().spectrum().to_vec()),
            }),
            Err(e) => {
                errors.push(format!("topology m={m}: {e}"));
                topologies.push(TopologyCheck {
                    m,
                    lambda0: None,
                    spectrum: None,
                });
            }
        }
        let mut obj = cfg.objective.clone();
        obj.m = m;
        let report = obj
            .build()
            .and_then(|spec| {
                spec.estimate_assumptions(&obj.noise, ASSUMPTION_PROBES, cfg.campaign.master_seed)
            })
            .map_err(|e| errors.push(format!("objective m={m}: {e}")))
            .ok();
        assumptions.push(AssumptionCheck { m, report });
    }

    let mut schedules = Vec::new();
    for s in cfg.schedules() {
        let label = schedule_label(&s);
        let m = cfg.worker_counts()[0];
        match s.build(m) {
            Ok(built) => {
                let rm = built.robbins_monro_valid();
                let waiver = match built.admissible_in(s.regime) {
                    Ok(w) => w,
                    Err(reason) => {
                        errors.push(format!("schedule {label} in {:?} regime: {reason}", s.regime));
                        None
                    }
                };
                schedules.push(ScheduleCheck {
                    schedule: label,
                    regime: s.regime,
                    robbins_monro_valid: rm.valid,
                    reason: rm.reason,
                    waiver,
                });
            }
            Err(e) => errors.push(format!("schedule {label}: {e}")),
        }
    }

    let mut seen = std::collections::BTreeSet::new();
    for cell in cfg.cells() {
        if let Err(e) = cell.run.validate() {
            if seen.insert(e.to_string()) {
                errors.push(format!("cell {} [{}]: {e}", cell.index, cell.label()));
            }
            continue;
        }
        if cell.run.schedule.regime == Regime::Rate {
            if let Ok(sim) = Simulation::new(cell.run.clone()) {
                if let Err(e) = check_rate_regime(&sim) {
                    if seen.insert(e.to_string()) {
                        errors.push(format!("cell {} [{}]: {e}", cell.index, cell.label()));
                    }
                }
            }
        }
    }
    if let Some(w) = cfg.campaign.hit_worker {
        if cfg.worker_counts().iter().any(|&m| w >= m) {
            errors.push(format!("campaign.hit_worker = {w} is not a worker index"));
        }
    }

    ValidationReport {
        ok: errors.is_empty(),
        topologies,
        schedules,
        assumptions,
        errors,
    }
}

/// Contents of `failures.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureManifest {
    pub schema: String,
    pub version: u32,
    pub failures: Vec<Failure>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub output: CampaignOutput,
    pub report: Report,
}

impl RunSummary {
    /// Nonzero when a cell failed or a checked property did not hold.
    pub fn exit_code(&self) -> i32 {
        i32::from(!self.output.failures.is_empty() || self.report.failed())
    }
}

pub fn run(cfg: &CampaignConfig) -> anyhow::Result<RunSummary> {
    let v = validate(cfg);
    if !v.ok {
        bail!("config failed validation:\n  {}", v.errors.join("\n  "));
    }
    let output = run_campaign(cfg)?;
    let dir = &cfg.campaign.output_dir;
    write_atomic(&dir.join(ENSEMBLE_CSV), &to_csv(&output.ensemble)?)?;
    write_atomic(&dir.join(HITTING_CSV), &to_csv(&output.hitting)?)?;
    write_atomic(&dir.join(RATE_CSV), &to_csv(&output.rate)?)?;
    let failures_path = dir.join(FAILURES_JSON);
    if output.failures.is_empty() {
        if failures_path.exists() {
            std::fs::remove_file(&failures_path)?;
        }
    } else {
        let manifest = FailureManifest {
            schema: "dmsgd failures".into(),
            version: SCHEMA_VERSION,
            failures: output.failures.clone(),
        };
        write_atomic(&failures_path, &serde_json::to_vec_pretty(&manifest)?)?;
    }
    let report = build_report(cfg, &output.ensemble, &output.hitting, &output.rate);
    write_atomic(
        &dir.join(REPORT_TXT),
        report.render(&output.failures, &output.timings).as_bytes(),
    )?;
    write_charts(cfg, &output.ensemble, &output.hitting)?;
    Ok(RunSummary { output, report })
}

fn read_table<T: crate::tables::Table>(dir: &Path, name: &str) -> anyhow::Result<Vec<T>> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    from_csv(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Rebuilds `report.txt` and the charts from the CSVs already on disk.
pub fn report(cfg: &CampaignConfig) -> anyhow::Result<Report> {
    let dir = &cfg.campaign.output_dir;
    let ensemble: Vec<EnsembleRow> = read_table(dir, ENSEMBLE_CSV)?;
    let hitting: Vec<HittingRow> = read_table(dir, HITTING_CSV)?;
    let rate: Vec<RateRow> = read_table(dir, RATE_CSV)?;
    let failures_path = dir.join(FAILURES_JSON);
    let failures: Vec<Failure> = if failures_path.exists() {
        let m: FailureManifest = serde_json::from_slice(&std::fs::read(&failures_path)?)
            .with_context(|| format!("parsing {}", failures_path.display()))?;
        if m.schema != "dmsgd failures" || m.version != SCHEMA_VERSION {
            bail!(
                "{} declares {} version {}, this build reads version {SCHEMA_VERSION}",
                failures_path.display(),
                m.schema,
                m.version
            );
        }
        m.failures
    } else {
        Vec::new()
    };
    let report = build_report(cfg, &ensemble, &hitting, &rate);
    write_atomic(&dir.join(REPORT_TXT), report.render(&failures, &[]).as_bytes())?;
    write_charts(cfg, &ensemble, &hitting)?;
    Ok(report)
}

fn write_charts(
    cfg: &CampaignConfig,
    ensemble: &[EnsembleRow],
    hitting: &[HittingRow],
) -> anyhow::Result<()> {
    let charts = cfg.campaign.output_dir.join("charts");
    write_atomic(&charts.join("loss.svg"), loss_chart(ensemble).to_svg().as_bytes())?;
    write_atomic(&charts.join("grad_norm.svg"), grad_chart(ensemble).to_svg().as_bytes())?;
    let cells = cfg.cells();
    let mut sums = BTreeMap::new();
    for r in hitting {
        if let std::collections::btree_map::Entry::Vacant(e) = sums.entry(r.cell) {
            let cell = cells
                .get(r.cell)
                .with_context(|| format!("hitting row names unknown cell {}", r.cell))?;
            let s = cell.run.schedule.build(cell.m)?;
            e.insert(PartialSums::new(&s, cfg.campaign.horizon));
        }
    }
    let chart = ccdf_chart(hitting, |cell, n| sums[&cell].at(n.min(cfg.campaign.horizon)));
    write_atomic(&charts.join("ccdf.svg"), chart.to_svg().as_bytes())?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTable {
    pub schema: String,
    pub version: u32,
    pub steps: u64,
    pub sequences: String,
    pub n: Vec<u64>,
    pub grad_norm_sq: Vec<f64>,
}

/// Exact `E‖∇g(x̄_n)‖²` over `steps` noisy steps of the config's single cell.
pub fn oracle(cfg: &CampaignConfig, steps: u64) -> anyhow::Result<OracleTable> {
    let cells = cfg.cells();
    if cells.len() != 1 {
        bail!("oracle needs a config with exactly one cell, found {}", cells.len());
    }
    let mut run = cells[0].run.clone();
    run.horizon = steps + 1;
    run.record_every = 1;
    let sim = Simulation::new(run)?;
    let e = exhaustive_expectation(&sim, steps)?;
    let table = OracleTable {
        schema: "dmsgd oracle".into(),
        version: SCHEMA_VERSION,
        steps,
        sequences: e.sequences.to_string(),
        n: e.n,
        grad_norm_sq: e.grad_norm_sq,
    };
    write_atomic(
        &cfg.campaign.output_dir.join(ORACLE_JSON),
        &serde_json::to_vec_pretty(&table)?,
    )?;
    Ok(table)
}
