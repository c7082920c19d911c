//! Training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{prepare_inputs, read_manifest, sample_clip, synthesize_clip, SceneConfig, VideoClip};
use crate::error::{Error, Result};
use crate::model::MirrorSegModel;
use crate::objective::{hybrid_loss, LossBreakdown};

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub steps: usize,
    /// Tab-separated `step  loss` lines.
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Loss of one prepared clip under the current parameters.
pub fn clip_loss(model: &MirrorSegModel, clip: &VideoClip) -> Result<LossBreakdown> {
    let outs = model.forward_clip(clip)?;
    let masks = (0..3)
        .map(|i| Ok(clip.gt[i].to_tensor(model.dtype())?))
        .collect::<Result<Vec<_>>>()?;
    let finals: Vec<_> = outs.iter().map(|o| o.logits.clone()).collect();
    let inters: Vec<_> = outs.iter().map(|o| o.inter_logits.clone()).collect();
    hybrid_loss(&finals, &inters, &masks)
}

pub fn optimizer(model: &MirrorSegModel, cfg: &RunConfig) -> Result<AdamW> {
    let params = ParamsAdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..ParamsAdamW::default()
    };
    Ok(AdamW::new(model.params().all_vars(), params)?)
}

/// Optimizer state bound to a model; one clip per step.
pub struct Trainer<'a> {
    model: &'a MirrorSegModel,
    opt: AdamW,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a MirrorSegModel) -> Result<Self> {
        Ok(Self {
            model,
            opt: optimizer(model, model.config())?,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, clip: &VideoClip) -> Result<LossBreakdown> {
        let loss = clip_loss(self.model, clip)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss: loss.total,
            });
        }
        self.opt.backward_step(&loss.objective)?;
        self.step += 1;
        Ok(loss)
    }
}

/// Runs `opts.steps` optimizer steps, cycling through `clips` in order, one clip per step.
pub fn train(model: &MirrorSegModel, clips: &[VideoClip], opts: &TrainOptions) -> Result<TrainReport> {
    if clips.is_empty() {
        return Err(Error::Invalid("no training clips".into()));
    }
    let mut trainer = Trainer::new(model)?;
    let mut log = match &opts.log_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Some(BufWriter::new(File::create(p)?))
        }
        None => None,
    };
    let mut losses = Vec::with_capacity(opts.steps);
    let mut checkpoints = Vec::new();
    for step in 0..opts.steps {
        let clip = &clips[step % clips.len()];
        let loss = trainer.step(clip)?;
        losses.push(loss.total);
        if let Some(w) = log.as_mut() {
            writeln!(w, "{step}\t{:.8}", loss.total)?;
        }
        log::debug!("step {step}: loss {:.6}", loss.total);
        let every = opts.checkpoint_every.max(1);
        if let Some(dir) = &opts.checkpoint_dir {
            if (step + 1) % every == 0 || step + 1 == opts.steps {
                let path = dir.join(format!("step{:06}.safetensors", step + 1));
                save_checkpoint(model, &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    Ok(TrainReport { losses, checkpoints })
}

/// Synthetic scene settings used for toy training at side `size`.
pub fn synthetic_scene_config(size: usize) -> SceneConfig {
    SceneConfig::new(size, size)
}

/// `count` prepared synthetic clips, deterministic in `seed`.
pub fn synthetic_clips(size: usize, count: usize, seed: u64) -> Result<Vec<VideoClip>> {
    let cfg = synthetic_scene_config(size);
    (0..count)
        .map(|i| prepare_inputs(&synthesize_clip(&cfg, seed.wrapping_add(i as u64))?, size))
        .collect()
}

/// Every clip of a split: centers `1..=len-2` of each listed video.
pub fn dataset_clips(root: &Path, split: &str, cfg: &RunConfig) -> Result<Vec<VideoClip>> {
    let manifest = root.join(format!("{split}.tsv"));
    let videos = read_manifest(&manifest)?;
    if videos.is_empty() {
        return Err(Error::Invalid(format!("split `{split}` lists no videos")));
    }
    let mut clips = Vec::new();
    for (id, _) in &videos {
        let len = crate::data::video_length(root, id)?;
        for t in 1..len.saturating_sub(1) {
            clips.push(prepare_inputs(&sample_clip(root, id, t, cfg.seed)?, cfg.input_size)?);
        }
    }
    Ok(clips)
}

pub fn total_steps(cfg: &RunConfig, clips: usize) -> usize {
    cfg.max_steps.unwrap_or(cfg.epochs * clips)
}
