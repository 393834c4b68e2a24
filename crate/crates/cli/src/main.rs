//! `aceg`: synthesize desk worlds, pre-train the regressor, map novel scenes
//! and localize query frames.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ACEG_OUT";

#[derive(Parser, Debug)]
#[command(name = "aceg", version, about = "Scene coordinate regression with map codes, at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (JSON). Flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory. Defaults to `$ACEG_OUT/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is bit-reproducible.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Fast,
    Thorough,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Views {
    Query,
    Mapping,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scene tuples, their pre-training buffers and a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of training tuples.
        #[arg(long)]
        n_train: Option<usize>,
        /// Number of held-out tuples.
        #[arg(long)]
        n_heldout: Option<usize>,
    },
    /// Pre-train θ on the tuples listed in a manifest.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest written by `synth`.
        #[arg(long)]
        manifest: PathBuf,
        /// Skip query iterations.
        #[arg(long)]
        mapping_only: bool,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total mapping iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// Stop after this many mapping iterations (checkpoint is written).
        #[arg(long)]
        stop_at: Option<usize>,
        /// Mapping iterations between log lines.
        #[arg(long)]
        log_every: Option<usize>,
        /// Mapping iterations between checkpoints (0 = only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Fit a map code for one scene from its mapping views.
    Map {
        #[command(flatten)]
        common: Common,
        /// Pre-trained regressor weights (`theta.prm`).
        #[arg(long)]
        theta: PathBuf,
        /// Scene tuple file.
        #[arg(long)]
        scene: PathBuf,
        /// Mapping budget preset; replaces the config's mapping settings.
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
    },
    /// Localize the views of one scene against a map code.
    Localize {
        #[command(flatten)]
        common: Common,
        /// Pre-trained regressor weights (`theta.prm`).
        #[arg(long)]
        theta: PathBuf,
        /// Map code written by `map`.
        #[arg(long)]
        code: PathBuf,
        /// Scene tuple file.
        #[arg(long)]
        scene: PathBuf,
        /// Which views of the tuple to localize.
        #[arg(long, value_enum, default_value_t = Views::Query)]
        views: Views,
        /// Disable uncertainty prefiltering.
        #[arg(long)]
        no_prefilter: bool,
    },
    /// Map and localize every scene tuple in a directory.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Pre-trained regressor weights (`theta.prm`).
        #[arg(long)]
        theta: PathBuf,
        /// Directory of scene tuple files.
        #[arg(long)]
        scenes: PathBuf,
        /// Mapping budget preset; replaces the config's mapping settings.
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// Disable uncertainty prefiltering.
        #[arg(long)]
        no_prefilter: bool,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Random configurations per op.
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { common, n_train, n_heldout } => commands::synth(&common, n_train, n_heldout),
        Command::Pretrain {
            common,
            manifest,
            mapping_only,
            resume,
            iterations,
            stop_at,
            log_every,
            checkpoint_every,
        } => commands::pretrain(
            &common,
            &commands::PretrainArgs {
                manifest,
                mapping_only,
                resume,
                iterations,
                stop_at,
                log_every,
                checkpoint_every,
            },
        ),
        Command::Map { common, theta, scene, preset } => commands::map(&common, &theta, &scene, preset),
        Command::Localize {
            common,
            theta,
            code,
            scene,
            views,
            no_prefilter,
        } => commands::localize(&common, &theta, &code, &scene, views, no_prefilter),
        Command::Eval {
            common,
            theta,
            scenes,
            preset,
            no_prefilter,
        } => commands::eval(&common, &theta, &scenes, preset, no_prefilter),
        Command::Gradcheck { configs, seed } => commands::gradcheck(configs, seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
