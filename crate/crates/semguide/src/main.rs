use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semguide::cli;
use semguide::config::Variant;

/// Semantic-guided multi-label pattern classification experiments.
#[derive(Parser)]
#[command(name = "semguide", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config JSON (falls back to $SEMGUIDE_CONFIG, then --preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset when no config file is given.
    #[arg(long, default_value = "fast", value_parser = ["fast", "full"])]
    preset: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and assign the train/test split.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of samples (overrides the config).
        #[arg(long)]
        n: Option<usize>,
        /// Dataset seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the activation-map generator.
    TrainCam {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (from generate-data).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-sample activation maps from a trained CAM checkpoint.
    ExportCams {
        #[arg(long)]
        cam_checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output archive path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the embedding + classifier stage for one variant.
    TrainClassifier {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// CAM checkpoint (required unless the variant is rgb_baseline).
        #[arg(long)]
        cam_checkpoint: Option<PathBuf>,
        /// Overrides the config's variant.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a classifier checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all five variants under shared budgets for each seed.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training seeds (repeatable).
        #[arg(long = "seed", default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Merge two evaluation directories into one comparison report.
    Report {
        /// Evaluation directories: <baseline> <candidate>.
        #[arg(required = true, num_args = 2)]
        inputs: Vec<PathBuf>,
        /// Output Markdown path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> semguide::Result<()> {
    let args = Cli::parse();
    match args.command {
        Command::GenerateData { config, n, seed, out } => {
            let cfg = cli::resolve_config(config.config.as_deref(), &config.preset)?;
            cli::cmd_generate_data(cfg, n, seed, &out)
        }
        Command::TrainCam { config, data, out } => {
            let cfg = cli::resolve_config(config.config.as_deref(), &config.preset)?;
            cli::cmd_train_cam(cfg, &data, &out)
        }
        Command::ExportCams {
            cam_checkpoint,
            data,
            out,
        } => cli::cmd_export_cams(&cam_checkpoint, &data, &out),
        Command::TrainClassifier {
            config,
            data,
            cam_checkpoint,
            variant,
            out,
        } => {
            let cfg = cli::resolve_config(config.config.as_deref(), &config.preset)?;
            let variant = variant.map(|v| v.parse::<Variant>()).transpose()?;
            cli::cmd_train_classifier(cfg, &data, cam_checkpoint.as_deref(), &out, variant)
        }
        Command::Evaluate {
            checkpoint,
            data,
            out,
        } => cli::cmd_evaluate(&checkpoint, &data, &out),
        Command::Ablate {
            config,
            data,
            out,
            seeds,
        } => {
            let cfg = cli::resolve_config(config.config.as_deref(), &config.preset)?;
            cli::cmd_ablate(cfg, &data, &out, &seeds)
        }
        Command::Report { inputs, out } => cli::cmd_report(&inputs, &out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
