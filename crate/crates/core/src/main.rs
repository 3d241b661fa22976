use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avatar_diffusion::checkpoint::Checkpoint;
use avatar_diffusion::data::{synth_dataset, SynthDataset, SynthOptions};
use avatar_diffusion::infer::{infer, InferRequest};
use avatar_diffusion::motion::{windowed_motion_metrics, KeypointSequence};
use avatar_diffusion::train::{
    checkpoint_with_step, extractor_for, resume, train_stage1, train_stage2, TrainOptions, TrainingData,
};
use avatar_diffusion::tsm::schedule_for;
use avatar_diffusion::{Error, ModelConfig, Result, Stage};
use candle_core::Device;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "avatar-diffusion", version, about = "Audio-driven portrait video diffusion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Config JSON file, or a preset name (`toy`, `full`).
    #[arg(long, global = true)]
    config: Option<String>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural talking-face dataset.
    SynthData {
        #[arg(long, default_value_t = 4)]
        videos: usize,
        #[arg(long, default_value_t = 64)]
        frames: usize,
    },
    /// Train stage 1 or stage 2.
    Train {
        #[arg(long, value_parser = ["1", "2"])]
        stage: String,
        /// Dataset directory written by `synth-data`.
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint (required for stage 2).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from a checkpoint of the same stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
    },
    /// Generate frames from audio and a reference image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Defaults to the audio duration.
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Motion metrics for a keypoint JSON-lines file.
    Metrics {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Window length in frames; defaults to the clip length.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Print the motion-frame slot to raw-index map.
    TsmSchedule,
}

fn load_config(common: &Common) -> Result<ModelConfig> {
    let mut cfg = match common.config.as_deref() {
        None => ModelConfig::toy(),
        Some(name) => match ModelConfig::preset(name) {
            Some(c) => c,
            None => ModelConfig::from_file(name)?,
        },
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()
}

fn out_dir(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Format("--out is required for this command".into()))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.cmd {
        Command::SynthData { videos, frames } => {
            let cfg = load_config(common)?;
            let ds = synth_dataset(videos, frames, cfg.seed, &SynthOptions::for_config(&cfg)?)?;
            let manifest = ds.save(out_dir(common)?)?;
            println!("{}", serde_json::to_string(&manifest)?);
        }
        Command::Train {
            stage,
            data,
            init,
            resume: resume_from,
            steps,
        } => {
            let cfg = load_config(common)?;
            let out = out_dir(common)?;
            let dev = Device::Cpu;
            let ds = SynthDataset::load(&data)?;
            let td = TrainingData::from_dataset(&ds, &cfg, &extractor_for(&cfg), &dev)?;
            let opts = TrainOptions { steps, log_every: 10 };
            let stage = if stage == "1" { Stage::One } else { Stage::Two };
            let (model, report) = match (&resume_from, stage, &init) {
                (Some(path), _, _) => {
                    let ck = Checkpoint::load(path, &dev)?;
                    if ck.header.stage != stage {
                        return Err(Error::CheckpointMismatch(format!(
                            "resume checkpoint is stage {}",
                            ck.header.stage.number()
                        )));
                    }
                    resume(&ck, &td, &opts)?
                }
                (None, Stage::One, _) => train_stage1(&cfg, &td, &opts)?,
                (None, Stage::Two, Some(path)) => train_stage2(&cfg, &td, &Checkpoint::load(path, &dev)?, &opts)?,
                (None, Stage::Two, None) => {
                    return Err(Error::CheckpointMismatch(
                        "stage 2 needs --init <stage-1 checkpoint>".into(),
                    ))
                }
            };
            std::fs::create_dir_all(out)?;
            let ck_path = out.join(format!("stage{}.ckpt", stage.number()));
            checkpoint_with_step(&model, report.start_step + report.losses.len()).save(&ck_path)?;
            std::fs::write(
                out.join(format!("stage{}_report.json", stage.number())),
                serde_json::to_string_pretty(&report)?,
            )?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": ck_path,
                    "steps": report.losses.len(),
                    "first10_mean": report.first_mean(10),
                    "last10_mean": report.last_mean(10),
                    "dropout_rates": report.dropout.rates(),
                })
            );
        }
        Command::Infer {
            checkpoint,
            audio,
            reference,
            seconds,
        } => {
            let manifest = infer(&InferRequest {
                checkpoint,
                audio,
                reference,
                seconds,
                seed: common.seed.unwrap_or(0),
                out_dir: out_dir(common)?.to_path_buf(),
            })?;
            println!(
                "{}",
                serde_json::json!({ "frames": manifest.frame_count, "clips": manifest.clip_boundaries.len() })
            );
        }
        Command::Metrics {
            generated,
            ground_truth,
            window,
        } => {
            let cfg = load_config(common)?;
            let gen = KeypointSequence::read_jsonl(generated)?;
            let gt = ground_truth.map(KeypointSequence::read_jsonl).transpose()?;
            let m = windowed_motion_metrics(&gen, gt.as_ref(), window.unwrap_or(cfg.clip_len))?;
            let text = serde_json::to_string_pretty(&m)?;
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("metrics.json"), &text)?;
            }
            println!("{text}");
        }
        Command::TsmSchedule => {
            let cfg = load_config(common)?;
            for (k, idx) in schedule_for(&cfg)?.indices.iter().enumerate() {
                println!("{k} {idx}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
