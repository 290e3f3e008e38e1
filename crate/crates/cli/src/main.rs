use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmsgd::commands;
use dmsgd::config::CampaignConfig;

#[derive(Parser)]
#[command(name = "dmsgd", version, about = "Distributed momentum SGD campaign runner")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `campaign.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 means one per core.
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
}

#[derive(Subcommand)]
enum Verb {
    /// Check the config and print the preflight report as JSON.
    Validate(Common),
    /// Execute the sweep and write records, tables, report and charts.
    Run(Common),
    /// Exact expectation by enumerating every Rademacher sequence.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Number of noisy steps to enumerate.
        #[arg(long)]
        horizon: u64,
    },
    /// Rebuild report.txt and charts from existing CSVs.
    Report(Common),
}

fn load(c: &Common) -> anyhow::Result<CampaignConfig> {
    let mut cfg = CampaignConfig::load(&c.config)?;
    if let Some(out) = &c.out {
        cfg.campaign.output_dir = out.clone();
    }
    if let Some(p) = c.parallelism {
        cfg.campaign.parallelism = p;
    }
    if let Some(s) = c.master_seed {
        cfg.campaign.master_seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.verb {
        Verb::Validate(c) => {
            let cfg = match load(&c) {
                Ok(cfg) => cfg,
                Err(e) => {
                    let errors = serde_json::json!({ "ok": false, "errors": [format!("{e:#}")] });
                    println!("{}", serde_json::to_string_pretty(&errors)?);
                    return Ok(ExitCode::FAILURE);
                }
            };
            let v = commands::validate(&cfg);
            println!("{}", serde_json::to_string_pretty(&v)?);
            Ok(if v.ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Verb::Run(c) => {
            let cfg = load(&c)?;
            let summary = commands::run(&cfg)?;
            print!("{}", summary.report.render(&summary.output.failures, &summary.output.timings));
            Ok(if summary.exit_code() == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Verb::Oracle { common, horizon } => {
            let cfg = load(&common)?;
            let t = commands::oracle(&cfg, horizon)?;
            println!(
                "{} sequences, {} values written to {}",
                t.sequences,
                t.n.len(),
                cfg.campaign.output_dir.join(commands::ORACLE_JSON).display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Verb::Report(c) => {
            let cfg = load(&c)?;
            let report = commands::report(&cfg)?;
            print!("{}", report.render(&[], &[]));
            Ok(if report.failed() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
