//! Evaluation and inference over videos on disk.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};

use crate::data::{
    frame_path, load_depth, load_mask, load_rgb, prepare_frame, read_manifest, save_gray, video_length, Image,
    VideoClip,
};
use crate::error::{Error, Result};
use crate::model::{FrameOutput, MirrorSegModel};
use crate::nn::{resize_bilinear, sigmoid};
use crate::objective::{compute_metrics, MetricReport, THRESHOLD};
use crate::prompt::PointPromptSet;

/// Center frames that have both a previous frame and a successor: `1..=len-2`.
pub fn prediction_frames(len: usize) -> std::ops::RangeInclusive<usize> {
    if len < 3 {
        #[allow(clippy::reversed_empty_ranges)]
        return 1..=0;
    }
    1..=len - 2
}

/// Runs the model on one raw frame and returns the probability map at the frame's size
/// together with the raw outputs.
pub fn predict_frame(model: &MirrorSegModel, rgb: &Image, depth: &Image) -> Result<(Image, Tensor, FrameOutput)> {
    let (r, d, constant) = prepare_frame(rgb, depth, model.config().input_size)?;
    if constant {
        log::warn!("constant depth frame; using 0.5");
    }
    let dt = model.dtype();
    let out = model.forward_frame(&r.to_tensor(dt)?, &d.to_tensor(dt)?)?;
    let logits = resize_bilinear(&out.logits, rgb.height, rgb.width)?;
    let prob = Image::from_tensor(&sigmoid(&logits)?.to_dtype(DType::F32)?)?;
    Ok((prob, logits, out))
}

fn to_f64(img: &Image) -> Vec<f64> {
    img.data.iter().map(|&v| v as f64).collect()
}

/// Metrics of every frame of prepared clips (all three frames of each clip).
pub fn evaluate_clips(model: &MirrorSegModel, clips: &[VideoClip]) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for clip in clips {
        for (i, fo) in model.forward_clip(clip)?.iter().enumerate() {
            let prob = Image::from_tensor(&sigmoid(&fo.logits)?.to_dtype(DType::F32)?)?;
            out.push(compute_metrics(&to_f64(&prob), &to_f64(&clip.gt[i]), THRESHOLD)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EvalTable {
    pub rows: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
}

impl EvalTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("video_id\tiou\tf_beta\taccuracy\tmae\n");
        let mut row = |id: &str, m: &MetricReport| {
            let _ = writeln!(s, "{id}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", m.iou, m.f_beta, m.accuracy, m.mae);
        };
        for (id, m) in &self.rows {
            row(id, m);
        }
        row("mean", &self.mean);
        s
    }
}

/// Per-video metrics (mean over frames) and the mean over videos for `<root>/<split>.tsv`.
pub fn evaluate_split(model: &MirrorSegModel, root: &Path, split: &str) -> Result<EvalTable> {
    let videos = read_manifest(&root.join(format!("{split}.tsv")))?;
    if videos.is_empty() {
        return Err(Error::Invalid(format!("split `{split}` lists no videos")));
    }
    let mut rows = Vec::with_capacity(videos.len());
    for (id, _) in &videos {
        let len = video_length(root, id)?;
        let mut frames = Vec::new();
        for t in prediction_frames(len) {
            let rgb = load_rgb(&frame_path(root, id, "rgb", t))?;
            let depth = load_depth(&frame_path(root, id, "depth", t))?;
            let gt = load_mask(&frame_path(root, id, "mask", t))?;
            let (prob, _, _) = predict_frame(model, &rgb, &depth)?;
            frames.push(compute_metrics(&to_f64(&prob), &to_f64(&gt), THRESHOLD)?);
        }
        if frames.is_empty() {
            return Err(Error::Invalid(format!("video `{id}` has no frame with both neighbours")));
        }
        rows.push((id.clone(), MetricReport::mean(&frames)));
    }
    let mean = MetricReport::mean(&rows.iter().map(|(_, m)| *m).collect::<Vec<_>>());
    Ok(EvalTable { rows, mean })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PredictOptions {
    pub dump_prompts: bool,
    pub dump_intermediate: bool,
    pub dump_logits: bool,
}

/// `frame_id x y score` per prompt, six decimals.
pub fn format_prompts(frame: usize, prompts: &PointPromptSet) -> String {
    let mut s = String::new();
    for ((x, y), score) in prompts.coords.iter().zip(&prompts.scores) {
        let _ = writeln!(s, "{frame} {x:.6} {y:.6} {score:.6}");
    }
    s
}

/// Raw logit dump: `MSK1`, height and width as little-endian u32, then row-major f32 values.
pub fn write_logits(path: &Path, logits: &Tensor) -> Result<()> {
    let (_, _, h, w) = logits.dims4()?;
    let v = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut buf = Vec::with_capacity(12 + 4 * v.len());
    buf.extend_from_slice(b"MSK1");
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_logits(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let bad = || Error::Load {
        path: path.to_path_buf(),
        reason: "not an MSK1 logit dump".into(),
    };
    if bytes.len() < 12 || &bytes[..4] != b"MSK1" {
        return Err(bad());
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * h * w {
        return Err(bad());
    }
    let v = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, v))
}

fn normalized(img: &Image) -> Image {
    let (lo, hi) = img.min_max();
    let mut out = img.clone();
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in &mut out.data {
        *v = (*v - lo) / span;
    }
    out
}

/// Videos under `input`: the directory itself when it has an `rgb/` folder, otherwise every
/// subdirectory that has one.
fn list_videos(input: &Path) -> Result<(PathBuf, Vec<String>)> {
    if input.join("rgb").is_dir() {
        let root = input.parent().unwrap_or(Path::new(".")).to_path_buf();
        let id = input
            .file_name()
            .ok_or_else(|| Error::Invalid(format!("cannot name video at {}", input.display())))?
            .to_string_lossy()
            .into_owned();
        return Ok((root, vec![id]));
    }
    let mut ids: Vec<String> = fs::read_dir(input)
        .map_err(|e| Error::Load {
            path: input.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("rgb").is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Invalid(format!("no videos found under {}", input.display())));
    }
    Ok((input.to_path_buf(), ids))
}

/// Writes `<out>/<video>/%06d.png` masks for every predictable frame. Returns the mask paths.
pub fn predict_videos(model: &MirrorSegModel, input: &Path, out: &Path, opts: PredictOptions) -> Result<Vec<PathBuf>> {
    let (root, ids) = list_videos(input)?;
    let mut written = Vec::new();
    for id in ids {
        let len = video_length(&root, &id)?;
        let dir = out.join(&id);
        fs::create_dir_all(&dir)?;
        let mut prompt_log = String::new();
        for t in prediction_frames(len) {
            let rgb = load_rgb(&frame_path(&root, &id, "rgb", t))?;
            let depth_path = frame_path(&root, &id, "depth", t);
            if !depth_path.exists() {
                return Err(Error::Load {
                    path: depth_path,
                    reason: "missing depth frame (predict needs RGB-D input)".into(),
                });
            }
            let depth = load_depth(&depth_path)?;
            if (depth.height, depth.width) != (rgb.height, rgb.width) {
                return Err(Error::Load {
                    path: depth_path,
                    reason: "depth size differs from rgb".into(),
                });
            }
            let (prob, logits, fo) = predict_frame(model, &rgb, &depth)?;
            let mut mask = prob.clone();
            for v in &mut mask.data {
                *v = if *v as f64 >= THRESHOLD { 1.0 } else { 0.0 };
            }
            let path = dir.join(format!("{t:06}.png"));
            save_gray(&mask, &path)?;
            written.push(path);
            if opts.dump_prompts {
                prompt_log.push_str(&format_prompts(t, &fo.prompts[0]));
            }
            if opts.dump_intermediate {
                for (name, map) in [("freq", &fo.freq_map), ("response", &fo.response.values)] {
                    let sub = dir.join(name);
                    fs::create_dir_all(&sub)?;
                    let img = Image::from_tensor(&map.to_dtype(DType::F32)?)?;
                    let img = normalized(&img).resize_bilinear(rgb.height, rgb.width);
                    save_gray(&img, &sub.join(format!("{t:06}.png")))?;
                }
            }
            if opts.dump_logits {
                let sub = dir.join("logits");
                fs::create_dir_all(&sub)?;
                write_logits(&sub.join(format!("{t:06}.msk")), &logits)?;
            }
        }
        if opts.dump_prompts {
            let mut f = fs::File::create(dir.join("prompts.txt"))?;
            f.write_all(prompt_log.as_bytes())?;
        }
    }
    Ok(written)
}
