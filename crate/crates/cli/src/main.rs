use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpprior::data::write_csv;
use gpprior::pipeline::{run_pipeline, DataSource, ExperimentConfig, Stage};

/// Functional GP priors for Bayesian neural networks.
///
/// The worker thread count follows `RAYON_NUM_THREADS`.
#[derive(Parser)]
#[command(name = "gpprior", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic data set to `<out>/data.csv`.
    Synth(Common),
    /// Ingest data and fit the prior.
    FitPrior(Common),
    /// Sample the posterior (resumes from the stored prior by default).
    Sample(Common),
    /// Evaluate stored posterior samples.
    Evaluate(Common),
    /// Run every stage.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration's.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stage to start from: ingest, fit-prior, sample or evaluate.
    #[arg(long)]
    stage: Option<String>,
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf), String> {
    let mut cfg = ExperimentConfig::from_file(&c.config).map_err(|e| format!("config: {e}"))?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or("no output directory: pass --out or set output_dir")?;
    Ok((cfg, out))
}

fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<(), String> {
    if matches!(cfg.data, DataSource::Csv { .. }) {
        return Err("synth needs a synthetic data source".into());
    }
    let data = cfg
        .data
        .load(cfg.stage_seed(1))
        .map_err(|e| e.to_string())?;
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let file = File::create(out.join("data.csv")).map_err(|e| e.to_string())?;
    write_csv(&data, file).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<(), String> {
    let (common, default_from, until) = match &cli.command {
        Command::Synth(c) => {
            let (cfg, out) = load(c)?;
            return synth(&cfg, &out);
        }
        Command::FitPrior(c) => (c, Stage::Ingest, Stage::FitPrior),
        Command::Sample(c) => (c, Stage::Sample, Stage::Sample),
        Command::Evaluate(c) => (c, Stage::Evaluate, Stage::Evaluate),
        Command::Pipeline(c) => (c, Stage::Ingest, Stage::Evaluate),
    };
    let from = match &common.stage {
        Some(s) => Stage::parse(s).map_err(|e| e.to_string())?,
        None => default_from,
    };
    let (cfg, out) = load(common)?;
    let res = run_pipeline(&cfg, &out, from, until).map_err(|e| e.to_string())?;
    for m in &res.metrics {
        let v = m.value.map_or("nan".to_string(), |v| format!("{v:.6}"));
        match m.std_error {
            Some(se) => println!("{}\t{v}\t± {se:.6}", m.metric),
            None => println!("{}\t{v}", m.metric),
        }
    }
    eprintln!("artifacts in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
