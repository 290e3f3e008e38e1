//! Campaign configuration: four TOML sections, expanded into a grid of cells.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dmsgd_core::engine::{InitPolicy, RecordGrid, RunConfig, DEFAULT_GUARD};
use dmsgd_core::objectives::ObjectiveConfig;
use dmsgd_core::rng::{derive_seed, Purpose};
use dmsgd_core::schedules::{ScheduleConfig, ScheduleFamily};
use dmsgd_core::topology::TopologyConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub topology: TopologyConfig,
    pub objective: ObjectiveConfig,
    pub schedule: ScheduleConfig,
    pub campaign: CampaignSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSection {
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
    /// Worker counts; defaults to `topology.m`.
    #[serde(default)]
    pub m: Vec<usize>,
    /// Extra schedules swept instead of the `[schedule]` section.
    #[serde(default)]
    pub schedules: Vec<ScheduleConfig>,
    /// Hitting thresholds.
    #[serde(default)]
    pub a0: Vec<f64>,
    /// Read `a0` as a fraction of the ensemble's initial `‖∇g(x̄₁)‖²`.
    #[serde(default)]
    pub a0_relative: bool,
    /// Measure hitting times on this worker's own gradient instead of the
    /// averaged iterate.
    #[serde(default)]
    pub hit_worker: Option<usize>,
    pub seeds: u64,
    pub horizon: u64,
    #[serde(default = "one")]
    pub record_every: u64,
    #[serde(default)]
    pub grid: RecordGrid,
    #[serde(default)]
    pub init: InitPolicy,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; 0 means one per available core.
    #[serde(default)]
    pub parallelism: usize,
    #[serde(default = "default_guard")]
    pub guard: f64,
    /// Horizons used by rate fits.
    #[serde(default = "default_rate_t")]
    pub rate_t: Vec<u64>,
    #[serde(default = "yes")]
    pub write_records: bool,
}

fn default_alpha() -> Vec<f64> {
    vec![0.0]
}

fn one() -> u64 {
    1
}

fn yes() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_guard() -> f64 {
    DEFAULT_GUARD
}

fn default_rate_t() -> Vec<u64> {
    vec![100, 1_000, 10_000, 100_000]
}

/// One point of the sweep grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub m: usize,
    pub schedule_index: usize,
    pub alpha: f64,
    pub run: RunConfig,
}

impl Cell {
    pub fn schedule_label(&self) -> String {
        schedule_label(&self.run.schedule)
    }

    pub fn label(&self) -> String {
        format!("m={} {} alpha={}", self.m, self.schedule_label(), self.alpha)
    }

    /// Seed of the `j`-th replicate.
    pub fn seed(&self, master: u64, j: u64) -> u64 {
        derive_seed(master, Purpose::Campaign, self.index as u64, j)
    }
}

pub fn schedule_label(s: &ScheduleConfig) -> String {
    let mut out = match s.family {
        ScheduleFamily::PowerLaw => "power_law".to_string(),
        ScheduleFamily::RateLaw => "rate_law".to_string(),
        ScheduleFamily::Constant => "constant".to_string(),
    };
    if let Some(c) = s.c {
        let _ = write!(out, " c={c}");
    }
    if let Some(p) = s.p {
        let _ = write!(out, " p={p}");
    }
    out
}

impl CampaignConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: CampaignConfig = toml::from_str(text)?;
        cfg.check_shape()?;
        Ok(cfg)
    }

    fn check_shape(&self) -> anyhow::Result<()> {
        let c = &self.campaign;
        if c.alpha.is_empty() {
            bail!("campaign.alpha must list at least one value");
        }
        if c.seeds == 0 {
            bail!("campaign.seeds must be >= 1");
        }
        if c.a0.iter().any(|a| !(*a > 0.0)) {
            bail!("campaign.a0 values must be positive");
        }
        if self.topology.m != self.objective.m {
            bail!(
                "topology.m = {} but objective.m = {}",
                self.topology.m,
                self.objective.m
            );
        }
        Ok(())
    }

    pub fn worker_counts(&self) -> Vec<usize> {
        if self.campaign.m.is_empty() {
            vec![self.topology.m]
        } else {
            self.campaign.m.clone()
        }
    }

    pub fn schedules(&self) -> Vec<ScheduleConfig> {
        if self.campaign.schedules.is_empty() {
            vec![self.schedule.clone()]
        } else {
            self.campaign.schedules.clone()
        }
    }

    /// Cells in sweep order: worker count, then schedule, then momentum.
    pub fn cells(&self) -> Vec<Cell> {
        let c = &self.campaign;
        let mut cells = Vec::new();
        for &m in &self.worker_counts() {
            for (si, schedule) in self.schedules().into_iter().enumerate() {
                for &alpha in &c.alpha {
                    let mut topology = self.topology.clone();
                    topology.m = m;
                    let mut objective = self.objective.clone();
                    objective.m = m;
                    let run = RunConfig {
                        topology,
                        objective,
                        schedule: schedule.clone(),
                        alpha,
                        horizon: c.horizon,
                        seed: 0,
                        record_every: c.record_every,
                        grid: c.grid,
                        init: c.init,
                        guard: c.guard,
                        keep_snapshots: false,
                        track_workers: c.hit_worker.is_some(),
                    };
                    cells.push(Cell {
                        index: cells.len(),
                        m,
                        schedule_index: si,
                        alpha,
                        run,
                    });
                }
            }
        }
        cells
    }

    /// Rate-fit horizons that fit inside the run.
    pub fn rate_horizons(&self) -> Vec<u64> {
        self.campaign
            .rate_t
            .iter()
            .copied()
            .filter(|&t| t >= 2 && t <= self.campaign.horizon)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[topology]
kind = "uniform"
m = 3

[objective]
family = "quadratic_consensus"
N = 2
m = 3

[schedule]
family = "power_law"
c = 0.1
p = 0.6

[campaign]
alpha = [0.0, 0.9]
m = [3, 5]
seeds = 2
horizon = 10
"#;

    #[test]
    fn cells_sweep_in_order() {
        let cfg = CampaignConfig::parse(BASE).unwrap();
        let cells = cfg.cells();
        assert_eq!(cells.len(), 4);
        assert_eq!((cells[1].m, cells[1].alpha), (3, 0.9));
        assert_eq!((cells[2].m, cells[2].alpha), (5, 0.0));
        assert_eq!(cells[2].run.objective.m, 5);
        assert_eq!(cells[0].label(), "m=3 power_law c=0.1 p=0.6 alpha=0");
    }

    #[test]
    fn seeds_do_not_repeat_across_cells() {
        let cfg = CampaignConfig::parse(BASE).unwrap();
        let mut seen = std::collections::HashSet::new();
        for cell in cfg.cells() {
            for j in 0..cfg.campaign.seeds {
                assert!(seen.insert(cell.seed(cfg.campaign.master_seed, j)));
            }
        }
    }

    #[test]
    fn unknown_keys_are_errors() {
        let bad = BASE.replace("seeds = 2", "seeds = 2\nsedes = 3");
        assert!(CampaignConfig::parse(&bad).is_err());
        let bad = BASE.replace("kind = \"uniform\"", "kind = \"uniform\"\nbeat = 0.1");
        assert!(CampaignConfig::parse(&bad).is_err());
    }
}
