use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fusenav::model::Modality;
use fusenav::numeric::OpKind;
use fusenav::Result;
use fusenav_cli::checkpoint::Checkpoint;
use fusenav_cli::commands::{self, Overrides, Report, BEST_CHECKPOINT};
use fusenav_cli::config::RunConfig;
use fusenav_cli::{exit_code, EXIT_CHECK, EXIT_OK};

#[derive(Parser, Debug)]
#[command(name = "fusenav", version, about = "Camera + LiDAR navigation pipeline")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed (also the training seed).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (for `synth`, the data root to write).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Disable the image-branch attention block.
    #[arg(long, global = true)]
    no_attention: bool,
    /// Disable the recurrent temporal stage.
    #[arg(long, global = true)]
    no_temporal: bool,
    /// Weight of the reliability prior in the fusion gate (0 disables it).
    #[arg(long, global = true, value_name = "B")]
    beta: Option<f64>,
    /// Sensor inputs to use.
    #[arg(long, global = true, value_name = "rgb|lidar|both")]
    modality: Option<Modality>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic KITTI-layout sequences, one per scenario preset.
    Synth,
    /// Train and write best/last checkpoints plus the epoch log.
    Train {
        /// Resume from this checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate NA, LP, FPS and RI per scenario.
    Eval {
        /// Defaults to best.ckpt in the output directory, if present.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every operation and the unrolled pipeline.
    Gradcheck {
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<OpKind>,
    },
    /// Time the per-frame pipeline.
    Bench {
        /// Defaults to best.ckpt in the output directory, if present.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
}

fn load_checkpoint(explicit: Option<&Path>, out_dir: &Path) -> Result<Option<(Checkpoint, PathBuf)>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let p = out_dir.join(BEST_CHECKPOINT);
            if !p.exists() {
                return Ok(None);
            }
            p
        }
    };
    Ok(Some((Checkpoint::load(&path)?, path)))
}

fn run(cli: Cli) -> Result<Report> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        no_attention: cli.no_attention,
        no_temporal: cli.no_temporal,
        beta: cli.beta,
        modality: cli.modality,
    };
    let base = match &cli.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    let resolve = |ckpt: Option<&Checkpoint>| -> Result<RunConfig> {
        // Without a config file, a checkpoint's own snapshot is used.
        let mut cfg = match (&base, ckpt) {
            (Some(c), _) => c.clone(),
            (None, Some(ck)) => ck.config.clone(),
            (None, None) => RunConfig::default(),
        };
        overrides.apply(&mut cfg)?;
        Ok(cfg)
    };
    let out_dir = |cfg: &RunConfig| overrides.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    match cli.command {
        Command::Synth => {
            let cfg = resolve(None)?;
            let root = overrides.out.clone().unwrap_or_else(|| cfg.data.root.clone());
            commands::synth(&cfg, &root)
        }
        Command::Train { checkpoint } => {
            let resume = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let cfg = resolve(None)?;
            commands::train(&cfg, &out_dir(&cfg), resume, |line| println!("{line}"))
        }
        Command::Eval { checkpoint } => {
            let default_dir = out_dir(&resolve(None)?);
            let ck = load_checkpoint(checkpoint.as_deref(), &default_dir)?;
            let cfg = resolve(ck.as_ref().map(|(c, _)| c))?;
            commands::eval(&cfg, ck.as_ref().map(|(c, p)| (c, p.as_path())), &out_dir(&cfg))
        }
        Command::Gradcheck { inject_fault } => {
            let cfg = resolve(None)?;
            commands::gradcheck(&cfg, inject_fault, &out_dir(&cfg))
        }
        Command::Bench { checkpoint } => {
            let default_dir = out_dir(&resolve(None)?);
            let ck = load_checkpoint(checkpoint.as_deref(), &default_dir)?;
            let cfg = resolve(ck.as_ref().map(|(c, _)| c))?;
            commands::bench(&cfg, ck.as_ref().map(|(c, p)| (c, p.as_path())), &out_dir(&cfg))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            let _ = commands::print_summary(&report, &mut std::io::stdout());
            match report.failure {
                Some(msg) => {
                    eprintln!("error: {msg}");
                    ExitCode::from(EXIT_CHECK)
                }
                None => ExitCode::from(EXIT_OK),
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

