//! Command-line front end: argument parsing, stage dispatch and the exit
//! code contract (0 success, 1 invalid input, 2 runtime failure).

mod config;
mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::{DataSection, EnsembleSection, EvalSection, ExperimentConfig, PerClassCounts, SourceSpec};
pub use pipeline::{
    DemoSummary, Manifest, ModelKind, Pipeline, AE_FILE, AE_LOG_FILE, CAE_FILE, ENSEMBLE_FILE, GMVAE_FILE,
    GMVAE_LOG_FILE, MANIFEST_FILE, REPORT_DIR, TEST_SEEN_FILE, TEST_UNSEEN_FILE, TIMINGS_FILE, TRAIN_FILE,
};

use crate::error::{Error, Result};
use crate::verify::{gradcheck_suite, GRADCHECK_TOLERANCE};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "BENDLENS_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "bendlens",
    version,
    about = "Simulated bend-resistant multimode-fiber imaging"
)]
pub struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true, default_value = "configs/desk.json")]
    pub config: PathBuf,
    /// Output directory; defaults to the config's eval.out_dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// 1: wavefront-shaped illumination, 2: random illumination.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub experiment: Option<u8>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the speckle ensemble.
    Simulate,
    /// Synthesize the train and test measurement datasets.
    SynthData,
    /// Train one model.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
    },
    /// Evaluate the trained models and write the report.
    Eval,
    /// Run the gradient-check suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Run every stage end to end.
    Demo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Gmvae,
    Ae,
    Cae,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Gmvae => ModelKind::Gmvae,
            ModelArg::Ae => ModelKind::Ae,
            ModelArg::Cae => ModelKind::Cae,
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. }
        | Error::InvalidArgument(_)
        | Error::InvalidLayer { .. }
        | Error::ShapeMismatch { .. }
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion { .. }
        | Error::UnexpectedEof(_)
        | Error::CountMismatch(_)
        | Error::Malformed(_)
        | Error::MissingPrerequisite(_)
        | Error::Json(_) => 1,
        Error::NonScalarLoss(_)
        | Error::NonFiniteGradient(_)
        | Error::NonFiniteLoss { .. }
        | Error::Diverged { .. }
        | Error::Io(_) => 2,
    }
}

/// Loads the config and applies the command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(e) = cli.experiment {
        cfg = cfg.for_experiment(e)?;
    }
    Ok(cfg)
}

/// Runs one subcommand; stage outputs are followed by a manifest refresh.
pub fn run(cli: &Cli) -> Result<()> {
    if let Command::Gradcheck { seeds } = cli.command {
        return run_gradcheck(seeds);
    }
    let cfg = resolve_config(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.eval.out_dir.clone());
    let p = Pipeline::new(cfg, out);
    match &cli.command {
        Command::Simulate => drop(p.simulate()?),
        Command::SynthData => drop(p.synth_data()?),
        Command::Train { model } => p.train((*model).into())?,
        Command::Eval => drop(p.evaluate()?),
        Command::Demo => {
            let s = p.run_demo()?;
            for (stage, secs) in &s.timings {
                log::info!("{stage:<12} {secs:8.1} s");
            }
            print_summary(&s);
            return Ok(());
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    p.write_manifest()?;
    Ok(())
}

fn print_summary(s: &DemoSummary) {
    let r = &s.report;
    for row in &r.psnr {
        println!(
            "psnr {:<6} {:<6} {:<6} {:6.2} ± {:5.2} dB",
            row.config, row.method, row.group, row.mean, row.std
        );
    }
    for (method, a) in &r.accuracy {
        if let (Some(seen), Some(unseen)) = (a.seen, a.unseen) {
            println!(
                "accuracy {method:<6} seen {:.3} ± {:.3}  unseen {:.3} ± {:.3}",
                seen.mean, seen.std, unseen.mean, unseen.std
            );
        }
    }
    for (which, v) in &r.silhouette {
        println!("silhouette {which:<6} {v:.4}");
    }
}

fn run_gradcheck(seeds: usize) -> Result<()> {
    let results = gradcheck_suite(seeds, Some(24))?;
    println!("{:<20} {:>12}  {:<6} worst parameter", "case", "max rel err", "result");
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{:<20} {:>12.3e}  {verdict:<6} {}",
            r.name, r.max_rel_error, r.worst_param
        );
    }
    if failed > 0 {
        return Err(Error::NonFiniteGradient(format!(
            "{failed} gradient-check cases above {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

/// Sizes the global thread pool from [`THREADS_ENV`] when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(format!("cannot size thread pool: {e}")))
}
