use std::path::PathBuf;
use std::process::ExitCode;

use candle_core::DType;
use clap::{Args, Parser, Subcommand};

use mirrorseg::checkpoint::{load_checkpoint, save_checkpoint};
use mirrorseg::config::{Profile, RunConfig};
use mirrorseg::data::{write_manifest, write_synthetic_video, SceneConfig, SyntheticScene};
use mirrorseg::gradcheck::{format_report, run_gradcheck, GradcheckOptions};
use mirrorseg::pipeline::{evaluate_split, predict_videos, PredictOptions};
use mirrorseg::train::{dataset_clips, synthetic_clips, total_steps, train, TrainOptions};
use mirrorseg::{Error, MirrorSegModel};

#[derive(Parser)]
#[command(name = "mirrorseg", version, about = "RGB-D video mirror segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Default bundle the config file and flags are applied on.
    #[arg(long, default_value = "toy")]
    profile: String,
    /// Overrides one config key, e.g. `--set lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let profile: Profile = self.profile.parse()?;
        let base = RunConfig::for_profile(profile);
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p, base)?,
            None => base,
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset split or on generated clips.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset root (overrides `dataset_root`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        /// Train on this many generated clips instead of a dataset.
        #[arg(long, value_name = "CLIPS")]
        synthetic: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory for checkpoints and the loss log.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Per-video metrics of a checkpoint on a split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict masks for every video under a directory.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        dump_prompts: bool,
        #[arg(long)]
        dump_intermediate: bool,
        #[arg(long)]
        dump_logits: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        broken_residual: bool,
    },
    /// Write a synthetic dataset to disk.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        videos: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Manifest name(s) listing every generated video.
        #[arg(long, default_values_t = [String::from("train"), String::from("test")])]
        split: Vec<String>,
    },
}

enum Failure {
    Error(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            cfg,
            data,
            split,
            synthetic,
            steps,
            out,
        } => {
            let mut cfg = cfg.resolve()?;
            if let Some(d) = data {
                cfg.dataset_root = Some(d);
            }
            if let Some(s) = steps {
                cfg.max_steps = Some(s);
            }
            let clips = match (synthetic, &cfg.dataset_root) {
                (Some(n), _) => synthetic_clips(cfg.input_size, n, cfg.seed)?,
                (None, Some(root)) => dataset_clips(root, &split, &cfg)?,
                (None, None) => {
                    return Err(Error::Config("give --data, dataset_root or --synthetic".into()).into())
                }
            };
            let model = MirrorSegModel::new(&cfg, DType::F32)?;
            log::info!("{} parameters, {} clips", model.params().num_parameters(), clips.len());
            let opts = TrainOptions {
                steps: total_steps(&cfg, clips.len()),
                log_path: Some(out.join("loss.tsv")),
                checkpoint_dir: Some(out.join("checkpoints")),
                checkpoint_every: cfg.checkpoint_every,
            };
            let report = train(&model, &clips, &opts)?;
            let last = out.join("model.safetensors");
            save_checkpoint(&model, &last)?;
            if let Some(l) = report.losses.last() {
                println!("steps {}  final loss {l:.6}", report.losses.len());
            }
            println!("checkpoint {}", last.display());
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            data,
            split,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let root = data
                .or_else(|| cfg.dataset_root.clone())
                .ok_or_else(|| Error::Config("give --data or dataset_root".into()))?;
            let model = load_checkpoint(&checkpoint, Some(&cfg), DType::F32)?;
            let table = evaluate_split(&model, &root, &split)?;
            match out {
                Some(p) => std::fs::write(p, table.to_tsv()).map_err(Error::from)?,
                None => print!("{}", table.to_tsv()),
            }
        }
        Command::Predict {
            cfg,
            checkpoint,
            input,
            output,
            dump_prompts,
            dump_intermediate,
            dump_logits,
        } => {
            let cfg = cfg.resolve()?;
            let model = load_checkpoint(&checkpoint, Some(&cfg), DType::F32)?;
            let opts = PredictOptions {
                dump_prompts,
                dump_intermediate,
                dump_logits,
            };
            let written = predict_videos(&model, &input, &output, opts)?;
            println!("{} masks written to {}", written.len(), output.display());
        }
        Command::Gradcheck { seed, broken_residual } => {
            let results = run_gradcheck(GradcheckOptions { seed, broken_residual })?;
            print!("{}", format_report(&results));
            let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.surface).collect();
            if !failed.is_empty() {
                return Err(Failure::Verification(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
        Command::Synth {
            out,
            videos,
            frames,
            size,
            seed,
            split,
        } => {
            let mut cfg = SceneConfig::new(size, size);
            cfg.num_frames = frames;
            let mut entries = Vec::with_capacity(videos);
            for v in 0..videos {
                let id = format!("video{v:03}");
                let scene = SyntheticScene::sample(&cfg, seed.wrapping_add(v as u64))?;
                write_synthetic_video(&out, &id, &scene)?;
                entries.push((id, frames));
            }
            for s in split {
                write_manifest(&out.join(format!("{s}.tsv")), &entries)?;
            }
            println!("{videos} videos written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::CheckpointMismatch { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
