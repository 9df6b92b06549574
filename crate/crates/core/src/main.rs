use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ar3d::cli;

#[derive(Parser)]
#[command(
    name = "ar3d",
    version,
    about = "Autoregressive 3D object detection on synthetic LiDAR scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes plus a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher-forced training; writes a checkpoint and a metrics file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// GRPO fine-tuning on the IoU-F1 reward, encoder frozen.
    FinetuneRl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect boxes in one scene; prints scene-file `b` lines.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// greedy | beam:K | nucleus:P,K,T
        #[arg(long, default_value = "greedy")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Precision/recall/F1 report over a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "greedy")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cascading refinement: prior detections seed a completion model.
    Cascade {
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        completion: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        iou: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train near-to-far / random / point-count variants and compare.
    AblateOrdering {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a scene (and optional predictions) to SVG.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData {
            config,
            count,
            seed,
            out,
        } => cli::cmd_gen_data(config.as_deref(), count, seed, &out),
        Command::Train {
            data,
            config,
            seed,
            out,
        } => cli::cmd_train(&data, config.as_deref(), seed, &out),
        Command::FinetuneRl {
            data,
            ckpt,
            config,
            seed,
            out,
        } => cli::cmd_finetune_rl(&data, &ckpt, config.as_deref(), seed, &out),
        Command::Detect {
            ckpt,
            scene,
            strategy,
            seed,
        } => {
            print!("{}", cli::cmd_detect(&ckpt, &scene, &strategy, seed)?);
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            strategy,
            seed,
        } => {
            print!("{}", cli::cmd_eval(&ckpt, &data, &strategy, seed)?);
            Ok(())
        }
        Command::Cascade {
            prior,
            completion,
            data,
            iou,
            seed,
        } => {
            print!("{}", cli::cmd_cascade(&prior, &completion, &data, iou, seed)?);
            Ok(())
        }
        Command::AblateOrdering {
            data,
            config,
            eval_data,
            seed,
        } => {
            print!(
                "{}",
                cli::cmd_ablate_ordering(&data, config.as_deref(), eval_data.as_deref(), seed)?
            );
            Ok(())
        }
        Command::Render { scene, pred, out } => cli::cmd_render(&scene, pred.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
