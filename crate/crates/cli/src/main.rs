//! `maskgraph` command-line driver.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Ctx;
use config::RunConfig;

/// Command-line misuse that clap cannot detect (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "maskgraph", version, about = "Graph-based boundary segmentation trained from pixel masks")]
struct Cli {
    /// Root directory for every input and output path.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// JSON run configuration layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `train.iterations=500` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for data generation, splitting and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-sample work; training itself is single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with exact boundary oracles.
    GenSynth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        /// Two organs sharing an interface.
        #[arg(long)]
        touching: bool,
        /// Fraction of samples without an organ-2 annotation.
        #[arg(long)]
        missing_fraction: Option<f64>,
    },
    /// Extract contours, contour statistics, topology and edge tensors.
    Prepare {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Fit graphs directly to each mask without a model.
    Fit {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        topology: Option<PathBuf>,
    },
    /// Train a model on a manifest.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a trained run and write metric reports.
    Eval {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Evaluate every manifest sample instead of the run's test split.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        oracles: Option<PathBuf>,
    },
    /// Render a landmark graph as SVG.
    ExportAtlas {
        #[arg(long)]
        topology: Option<PathBuf>,
        /// Prediction JSON from `fit` or `eval`.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// PGM mask drawn underneath.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Output file (default `atlas.svg`).
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("dataset.seed={seed}"));
        overrides.push(format!("train.seed={seed}"));
    }
    if let Command::GenSynth {
        n,
        size,
        touching,
        missing_fraction,
    } = &cli.command
    {
        if let Some(n) = n {
            overrides.push(format!("synth.n={n}"));
        }
        if let Some(s) = size {
            overrides.push(format!("synth.size={s}"));
        }
        if *touching {
            overrides.push("synth.touching=true".into());
        }
        if let Some(f) = missing_fraction {
            overrides.push(format!("synth.missing_fraction={f}"));
        }
    }
    if cli.threads == 0 {
        return Err(UsageError("--threads must be at least 1".into()).into());
    }
    let config = cli.config.as_ref().map(|c| if c.is_absolute() { c.clone() } else { cli.out.join(c) });
    let cfg = RunConfig::resolve(config.as_deref(), &overrides)?;
    let ctx = Ctx {
        root: cli.out.clone(),
        cfg,
        threads: cli.threads,
    };
    match &cli.command {
        Command::GenSynth { .. } => commands::gen_synth(&ctx),
        Command::Prepare { manifest } => commands::prepare(&ctx, manifest.as_deref()),
        Command::Fit { manifest, topology } => commands::fit(&ctx, manifest.as_deref(), topology.as_deref()),
        Command::Train {
            manifest,
            topology,
            iters,
            resume,
        } => commands::train(&ctx, manifest.as_deref(), topology.as_deref(), *iters, resume.as_deref()),
        Command::Eval {
            run,
            manifest,
            all,
            oracles,
        } => commands::eval(&ctx, run.as_deref(), manifest.as_deref(), *all, oracles.as_deref()),
        Command::ExportAtlas {
            topology,
            landmarks,
            mask,
            file,
        } => commands::export_atlas(&ctx, topology.as_deref(), landmarks.as_deref(), mask.as_deref(), file.as_deref()),
    }
}

fn main() -> ExitCode {
    let filter = std::env::var("MHG_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&filter).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
