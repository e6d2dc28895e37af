//! `mindvis`: decode images from 1D signal vectors. Subcommands cover the
//! full path from synthetic data to evaluated samples, plus an ablation
//! grid runner. Exit codes: 0 success, 1 invalid config or usage, 2
//! missing dependency artifact.

mod commands;
mod images;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use mindvis_core::cond::CondMode;
use mindvis_core::config::RunConfig;
use mindvis_core::{Error, Result};

use commands::Ctx;

#[derive(Parser)]
#[command(name = "mindvis", version, about = "Two-stage signal-to-image decoding")]
struct Cli {
    /// JSON run config; omitted means the built-in desk defaults. The
    /// resolved document lands in every manifest either way.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory artifacts are read from and written to.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the conditioning mode: c (cross-attention only) or ct
    /// (cross-attention plus time-embedding shift).
    #[arg(long = "cond-mode", global = true)]
    cond_mode: Option<String>,

    /// Override the sampler: ddpm or plms.
    #[arg(long, global = true)]
    sampler: Option<String>,

    /// Override the sampler's step count.
    #[arg(long, global = true)]
    steps: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset.
    SynthData,
    /// Train the masked signal model and the unconditional base denoiser.
    Pretrain,
    /// Finetune the conditioned denoiser on paired data.
    Finetune,
    /// Decode test inputs and write a comparison grid.
    Sample,
    /// Score decoded samples and write metric reports.
    Evaluate,
    /// Sweep one config axis, repeating each point over seeds.
    Ablate {
        /// Axis to vary (for instance mask_ratio or cond_mode).
        #[arg(long)]
        axis: String,
        /// Comma-separated values; omitted means the axis default sweep.
        #[arg(long)]
        values: Option<String>,
        /// Seeds per grid point.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn parse_cond_mode(s: &str) -> Result<CondMode> {
    match s {
        "c" => Ok(CondMode::C),
        "ct" => Ok(CondMode::Ct),
        other => Err(Error::config(format!("unknown conditioning mode {other:?}; expected c or ct"))),
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &cli.cond_mode {
        cfg.conditioning.mode = parse_cond_mode(mode)?;
    }
    if let Some(sampler) = &cli.sampler {
        cfg.eval.sampler = sampler.parse()?;
    }
    if let Some(steps) = cli.steps {
        cfg.eval.steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx { cfg: resolve_config(cli)?, out: cli.out.clone() };
    match &cli.command {
        Command::SynthData => commands::synth_data(&ctx),
        Command::Pretrain => commands::pretrain(&ctx),
        Command::Finetune => commands::finetune(&ctx),
        Command::Sample => commands::sample(&ctx),
        Command::Evaluate => commands::evaluate(&ctx),
        Command::Ablate { axis, values, repeats } => {
            commands::ablate(&ctx, axis, values.as_deref(), *repeats)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    env_logger::init();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::MissingArtifact(_) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}
