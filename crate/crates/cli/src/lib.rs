//! Command-line front end: config-driven subcommands that chain data
//! preparation, pre-training, detector training, evaluation, Grad-CAM and
//! comparison into the experiment matrix.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Context;
pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ssdet", version, about = "Self-supervised pre-training for single-object detection")]
pub struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory, overriding `output.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Seed for sampling, initialisation and augmentation.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,

    /// Suppress per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic train and test sets.
    Synth,
    /// Contrastive pre-training of the backbone on the unlabeled pool.
    Pretrain,
    /// Train detectors on frozen backbones for every method and n.
    Train {
        /// SSL backbone checkpoint (defaults to `<out>/pretrain/backbone.ckpt`).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate every trained detector on the test set.
    Eval,
    /// Grad-CAM heatmaps for test records.
    Gradcam {
        /// Detector checkpoint (defaults to every trained detector).
        #[arg(long, value_name = "PATH")]
        detector: Option<PathBuf>,
        /// Test record ids (`image_ref`); defaults to the first `eval.gradcam_records`.
        #[arg(long = "record", value_name = "ID")]
        records: Vec<String>,
    },
    /// Comparison tables and SSL-minus-reference difference plots.
    Compare {
        /// Directory searched recursively for `report.json` (defaults to `<out>/eval`).
        #[arg(long, value_name = "DIR")]
        reports: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut ctx = Context::new(config, cli.out.clone(), cli.seed, cli.force);
    ctx.verbose = !cli.quiet;
    match cli.command {
        Command::Synth => {
            let root = commands::cmd_synth(&ctx)?;
            println!("{}", root.display());
        }
        Command::Pretrain => {
            println!("{}", commands::cmd_pretrain(&ctx)?.display());
        }
        Command::Train { checkpoint } => {
            for p in commands::cmd_train(&ctx, checkpoint.as_deref())? {
                println!("{}", p.display());
            }
        }
        Command::Eval => {
            let reports = commands::cmd_eval(&ctx)?;
            print!("{}", ssdet::metrics::render_table(&reports));
        }
        Command::Gradcam { detector, records } => {
            for p in commands::cmd_gradcam(&ctx, detector.as_deref(), &records)? {
                println!("{}", p.display());
            }
        }
        Command::Compare { reports } => {
            let dir = reports.unwrap_or_else(|| ctx.out.join("eval"));
            for c in commands::cmd_compare(&dir, &ctx.out.join("compare"), ctx.force)? {
                println!("{}\n{}", c.table, c.differences);
            }
        }
    }
    Ok(())
}
