mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thinkgen_core::{ControlType, Error};

use crate::commands::{Context, EvaluateArgs, InferArgs};
use crate::config::LoadedConfig;

/// Reason-then-generate pipeline: curate, train, infer, evaluate.
#[derive(Parser)]
#[command(name = "thinkgen", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides `paths.out`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Control type; overrides `curation.control_type`.
    #[arg(long, value_name = "TYPE")]
    control_type: Option<ControlType>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a reasoning dataset from a manifest of control images and prompts.
    Curate {
        #[command(flatten)]
        common: Common,
        /// JSON-Lines manifest; overrides `paths.manifest`.
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Supervised fine-tuning on the curated dataset.
    TrainSft {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint metadata file.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Group-relative reinforcement fine-tuning.
    TrainRft {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint; defaults to `<out>/sft/checkpoint.json` when present.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
        /// Continue an interrupted run from this checkpoint metadata file.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Best-of-K generation for one prompt and control image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        /// Control image (PNG).
        #[arg(long, value_name = "PATH")]
        control: PathBuf,
        /// Number of candidates; overrides `inference.k`.
        #[arg(long)]
        k: Option<usize>,
        /// Generate a single candidate.
        #[arg(long)]
        no_scaling: bool,
        /// Policy checkpoint; defaults to the latest under `<out>`.
        #[arg(long, value_name = "PATH")]
        policy: Option<PathBuf>,
    },
    /// Conditional consistency and FID of generated images.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        generated: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        references: Option<PathBuf>,
        /// References are control maps rather than photos.
        #[arg(long)]
        reference_maps: bool,
    },
}

fn context(common: &Common) -> Result<Context, Error> {
    let loaded = LoadedConfig::load(common.config.as_deref())?;
    let out = match (&common.out, &loaded.config.paths.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => loaded.resolve(o),
        (None, None) => PathBuf::from("out"),
    };
    Ok(Context {
        seed: common.seed.unwrap_or(loaded.config.seed),
        control_type: common.control_type.unwrap_or(loaded.config.curation.control_type),
        out,
        loaded,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Curate { common, manifest } => commands::curate(&context(common)?, manifest.as_deref()),
        Command::TrainSft { common, resume } => commands::train_sft_cmd(&context(common)?, resume.as_deref()),
        Command::TrainRft { common, init, resume } => {
            commands::train_rft_cmd(&context(common)?, init.as_deref(), resume.as_deref())
        }
        Command::Infer { common, prompt, control, k, no_scaling, policy } => commands::infer(
            &context(common)?,
            &InferArgs { prompt, control, k: *k, no_scaling: *no_scaling, policy: policy.as_deref() },
        ),
        Command::Evaluate { common, generated, references, reference_maps } => commands::evaluate(
            &context(common)?,
            &EvaluateArgs { generated: generated.as_deref(), references: references.as_deref(), reference_maps: *reference_maps },
        ),
    }
}

/// 2 config, 3 backend, 4 data.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::root) {
        Some(Error::Config(_)) => 2,
        Some(Error::Backend(_)) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
