use std::path::PathBuf;
use std::process::ExitCode;

use aqtriad_core::pipeline::{
    load_synth_config, run_cluster, run_evaluate, run_report, run_synth, run_train, RunConfig,
};
use aqtriad_core::series::Pollutant;
use aqtriad_core::synth::SynthConfig;
use aqtriad_core::{Error, Result};
use clap::{Parser, Subcommand};
use log::error;

#[derive(Debug, Parser)]
#[command(name = "aqtriad", version, about = "Cluster-based triad bias correction of air-quality forecasts")]
struct Cli {
    /// Run configuration (TOML). For `synth` this is a synthetic-world config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world (stations, observations, forecast files).
    Synth,
    /// Cluster stations on the configured geographic features.
    Cluster,
    /// Train one triad model per non-empty cluster.
    Train,
    /// Correct the holdout days and write report files.
    Evaluate {
        /// Also write per station-day SVG charts.
        #[arg(long)]
        plots: bool,
    },
    /// Rebuild report.csv and tables.txt from a predictions file.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "ozone")]
        pollutant: String,
        #[arg(long, default_value = "corrected")]
        label: String,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Argument("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Argument("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Internal(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth => {
            let mut cfg = match &cli.config {
                Some(p) => load_synth_config(p)?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("synthetic"));
            let s = run_synth(&cfg, &out)?;
            println!(
                "wrote {} files to {}; expected forecast RMSE {:.4}",
                s.files.len(),
                out.display(),
                s.expectations.forecast_rmse
            );
        }
        Command::Cluster => {
            let cfg = run_config(&cli)?;
            let c = run_cluster(&cfg)?;
            println!("k = {}  objective = {}", c.k, c.objective);
            for (i, n) in c.sizes().iter().enumerate() {
                println!("cluster {i}: {n} stations");
            }
        }
        Command::Train => {
            let cfg = run_config(&cli)?;
            let s = run_train(&cfg)?;
            println!(
                "trained {} cluster models into {}",
                s.models.len(),
                cfg.models_dir().display()
            );
            if !s.empty_clusters.is_empty() {
                println!("clusters without a model: {:?}", s.empty_clusters);
            }
        }
        Command::Evaluate { plots } => {
            let cfg = run_config(&cli)?;
            let r = run_evaluate(&cfg, *plots)?;
            let a = &r.aggregate;
            println!(
                "forecast RMSE {:.4}  corrected RMSE {:.4}  reduction {:.4} ({:.1}%)",
                a.forecast_rmse,
                a.corrected_rmse,
                a.reduction,
                100.0 * a.relative_reduction()
            );
            println!("report written to {}", cfg.eval_dir().display());
        }
        Command::Report {
            predictions,
            pollutant,
            label,
        } => {
            let pollutant: Pollutant = pollutant.parse()?;
            let out = cli
                .out
                .clone()
                .or_else(|| predictions.parent().map(PathBuf::from))
                .unwrap_or_default();
            let r = run_report(predictions, &out, pollutant, label)?;
            print!("{}", aqtriad_core::eval::render_tables(&r, label));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(4),
    }
}
