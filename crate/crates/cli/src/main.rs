use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use incseg_core::experiment::{check_run, run_experiment, run_sweep, ExperimentConfig, Preset, CONFIG_FILE};
use incseg_core::report::emit_report;
use incseg_core::trainer::Mode;

/// Domain-incremental segmentation experiments on synthetic multi-domain data.
#[derive(Parser)]
#[command(name = "incseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or reuse) the dataset and run the requested modes.
    Run {
        #[command(flatten)]
        common: Common,
        /// Exit non-zero unless every run check passes.
        #[arg(long)]
        check: bool,
    },
    /// Ablations over the number of clusters and the whitened layers.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated cluster counts, e.g. 2,3,4,5.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// Layer subsets separated by ';', taps within a subset by ',', e.g. "0;0,1;0,1,2,3".
        #[arg(long)]
        layers: Option<String>,
    },
    /// Render report.md, metrics.csv and heatmaps for a finished run.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the run checks of a finished run.
    Check {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["single", "compound", "custom"])]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// A mode name, a comma-separated list, or `all`.
    #[arg(long)]
    mode: Option<String>,
}

fn parse_modes(s: &str) -> Result<Vec<Mode>> {
    if s == "all" {
        return Ok(Mode::ALL.to_vec());
    }
    s.split(',').map(|m| Ok(m.trim().parse::<Mode>()?)).collect()
}

fn parse_layers(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|set| {
            set.split(',')
                .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad layer index {t:?}")))
                .collect()
        })
        .collect()
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &c.preset {
        cfg.preset = p.parse::<Preset>()?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(m) = &c.mode {
        cfg.modes = parse_modes(m)?;
    }
    Ok(cfg)
}

fn print_checks(out: &std::path::Path) -> Result<bool> {
    let checks = check_run(out)?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { common, check } => {
            let cfg = load_config(&common)?;
            let outcome = run_experiment(&cfg)?;
            emit_report(&outcome.dir)?;
            println!("run {} (config {})", outcome.dir.display(), &outcome.config_hash[..16]);
            for s in &outcome.summaries {
                println!(
                    "{:<20} BWT {:?} TL {:?} FTU {:?}",
                    s.mode.name(),
                    s.dsc.metrics.bwt,
                    s.dsc.metrics.tl,
                    s.dsc.metrics.ftu
                );
            }
            if check {
                return print_checks(&outcome.dir);
            }
        }
        Command::Sweep { common, k, layers } => {
            let mut cfg = load_config(&common)?;
            if !k.is_empty() {
                cfg.sweep.k = k;
            }
            if let Some(l) = layers {
                cfg.sweep.layers = parse_layers(&l)?;
            }
            if cfg.sweep.k.is_empty() && cfg.sweep.layers.is_empty() {
                bail!("sweep needs --k or --layers (or a sweep section in the config)");
            }
            let tables = run_sweep(&cfg)?;
            for r in tables.k.iter().chain(&tables.layers) {
                println!("{:<16} final DSC {:.4} BWT {:?} ratio {:.4}", r.label, r.final_dsc, r.bwt, r.ratio);
            }
        }
        Command::Report { out } => {
            for p in emit_report(&out)? {
                println!("{}", p.display());
            }
        }
        Command::Check { out } => {
            if !out.join(CONFIG_FILE).exists() {
                bail!("{} is not a run directory", out.display());
            }
            return print_checks(&out);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
