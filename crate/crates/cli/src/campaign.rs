//! Runs the sweep grid and reduces each cell to table rows.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use dmsgd_core::analysis::{
    ensemble, hitting_times, rate_fit, EnsembleStats, HitMetric, RateTarget,
};
use dmsgd_core::engine::{run, Simulation, TrajectoryRecord};
use dmsgd_core::objectives::ObjectiveSpec;
use dmsgd_core::schedules::ScheduleFamily;
use dmsgd_core::topology::CommSchedule;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CampaignConfig, Cell};
use crate::fsio::write_atomic;
use crate::tables::{EnsembleRow, HittingRow, RateRow, SCHEMA_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub cell: usize,
    pub label: String,
    /// `build`, `run`, `ensemble`, `hitting` or `rate`.
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellTiming {
    pub cell: usize,
    pub label: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CampaignOutput {
    pub ensemble: Vec<EnsembleRow>,
    pub hitting: Vec<HittingRow>,
    pub rate: Vec<RateRow>,
    pub failures: Vec<Failure>,
    pub timings: Vec<CellTiming>,
}

pub fn record_path(out: &Path, cell: usize, j: u64) -> PathBuf {
    out.join("records")
        .join(format!("cell{cell:03}"))
        .join(format!("seed{j:04}.jsonl"))
}

fn record_bytes(cell: &Cell, j: u64, rec: &TrajectoryRecord) -> Vec<u8> {
    let mut s = format!(
        "# dmsgd record schema={SCHEMA_VERSION} cell={} replicate={j} seed={} alpha={}\n",
        cell.index, rec.seed, rec.alpha
    );
    s.push_str(&rec.to_jsonl());
    s.into_bytes()
}

type Parts = Result<(CommSchedule, ObjectiveSpec), String>;

fn build_parts(cells: &[Cell]) -> BTreeMap<usize, Parts> {
    let mut parts = BTreeMap::new();
    for cell in cells {
        parts.entry(cell.m).or_insert_with(|| {
            let comm = cell.run.topology.build().map_err(|e| e.to_string())?;
            let obj = cell.run.objective.build().map_err(|e| e.to_string())?;
            Ok((comm, obj))
        });
    }
    parts
}

pub fn thread_pool(parallelism: usize) -> anyhow::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .context("starting worker pool")
}

/// Runs every cell into `cfg.campaign.output_dir`. Cell failures are
/// collected rather than returned.
pub fn run_campaign(cfg: &CampaignConfig) -> anyhow::Result<CampaignOutput> {
    let pool = thread_pool(cfg.campaign.parallelism)?;
    let cells = cfg.cells();
    let parts = build_parts(&cells);
    let mut out = CampaignOutput::default();
    for cell in &cells {
        let started = Instant::now();
        let sim = match &parts[&cell.m] {
            Ok((comm, obj)) => {
                Simulation::with_parts(cell.run.clone(), comm.clone(), obj.clone())
                    .map_err(|e| e.to_string())
                    .and_then(|sim| {
                        sim.schedule
                            .admissible_in(cell.run.schedule.regime)
                            .map(|_| sim)
                    })
            }
            Err(e) => Err(e.clone()),
        };
        match sim {
            Ok(sim) => pool.install(|| run_cell(cfg, cell, &sim, &mut out)),
            Err(error) => out.failures.push(Failure {
                cell: cell.index,
                label: cell.label(),
                stage: "build".into(),
                seed: None,
                error,
            }),
        }
        out.timings.push(CellTiming {
            cell: cell.index,
            label: cell.label(),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

fn run_cell(cfg: &CampaignConfig, cell: &Cell, sim: &Simulation, out: &mut CampaignOutput) {
    let c = &cfg.campaign;
    let dir = &c.output_dir;
    let fail = |stage: &str, seed: Option<u64>, error: String| Failure {
        cell: cell.index,
        label: cell.label(),
        stage: stage.into(),
        seed,
        error,
    };
    let results: Vec<(u64, Result<TrajectoryRecord, String>)> = (0..c.seeds)
        .into_par_iter()
        .map(|j| {
            let seed = cell.seed(c.master_seed, j);
            let rec = run(&sim.with_seed(seed)).map_err(|e| e.to_string());
            let rec = match rec {
                Ok(rec) if c.write_records => {
                    write_atomic(&record_path(dir, cell.index, j), &record_bytes(cell, j, &rec))
                        .map(|_| rec)
                        .map_err(|e| format!("{e:#}"))
                }
                other => other,
            };
            (seed, rec)
        })
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut failed = false;
    for (seed, r) in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                failed = true;
                out.failures.push(fail("run", Some(seed), e));
            }
        }
    }
    if failed {
        return;
    }
    let stats = match ensemble(&records) {
        Ok(s) => s,
        Err(e) => {
            out.failures.push(fail("ensemble", None, e.to_string()));
            return;
        }
    };
    out.ensemble.extend(ensemble_rows(cell, &stats));

    let metric = c.hit_worker.map_or(HitMetric::AveragedIterate, HitMetric::Worker);
    for &spec in &c.a0 {
        let a0 = if c.a0_relative {
            spec * stats.mean_grad_norm_sq[0]
        } else {
            spec
        };
        match hitting_times(&records, a0, &sim.schedule, metric) {
            Ok(samples) => out.hitting.extend(samples.into_iter().map(|s| HittingRow {
                cell: cell.index,
                m: cell.m,
                alpha: cell.alpha,
                schedule: cell.schedule_label(),
                a0_spec: spec,
                a0,
                seed: s.seed,
                tau: s.tau.value(),
                censored: s.tau.is_censored(),
                partial_sum_at_tau: s.partial_sum_at_tau,
            })),
            Err(e) => out.failures.push(fail("hitting", None, e.to_string())),
        }
    }

    if sim.schedule.family() == ScheduleFamily::RateLaw {
        let horizons = cfg.rate_horizons();
        for (target, name) in [
            (RateTarget::AveragedIterate, "averaged_iterate"),
            (RateTarget::ZSequence, "z_sequence"),
        ] {
            match rate_fit(&stats, &horizons, sim, target) {
                Ok(fit) => {
                    let prefactor = fit.prefactor();
                    out.rate.extend(fit.t_grid.iter().enumerate().map(|(i, &t)| RateRow {
                        cell: cell.index,
                        m: cell.m,
                        alpha: cell.alpha,
                        schedule: cell.schedule_label(),
                        target: name.into(),
                        t,
                        subopt: fit.subopt[i],
                        subopt_stderr: fit.subopt_stderr[i],
                        slope: fit.slope,
                        intercept: fit.intercept,
                        r2: fit.r2,
                        prefactor,
                    }))
                }
                Err(e) => out.failures.push(fail("rate", None, format!("{name}: {e}"))),
            }
        }
    }
}

fn ensemble_rows(cell: &Cell, s: &EnsembleStats) -> Vec<EnsembleRow> {
    let label = cell.schedule_label();
    (0..s.grid.len())
        .map(|j| EnsembleRow {
            cell: cell.index,
            m: cell.m,
            alpha: cell.alpha,
            schedule: label.clone(),
            n: s.grid[j],
            seeds: s.seeds,
            mean_grad_norm_sq: s.mean_grad_norm_sq[j],
            stderr_grad_norm_sq: s.stderr_grad_norm_sq[j],
            tams: s.tams[j],
            tams_interp_err: s.tams_interp_err[j],
            mean_loss: s.mean_loss[j],
            stderr_loss: s.stderr_loss[j],
            mean_consensus: s.mean_consensus[j],
            stderr_consensus: s.stderr_consensus[j],
            mean_u_v_norm: s.mean_u_v_norm[j],
            mean_z_subopt: s.mean_z_subopt.as_ref().map(|v| v[j]),
            stderr_z_subopt: s.stderr_z_subopt.as_ref().map(|v| v[j]),
        })
        .collect()
}
