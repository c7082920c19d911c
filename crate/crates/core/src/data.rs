//! RGB-D clip loading, three-frame temporal sampling and synthetic mirror scenes.
//!
//! On-disk layout, one directory per video:
//!
//! ```text
//! <root>/<video_id>/rgb/000000.png     8-bit RGB
//! <root>/<video_id>/depth/000000.png   16-bit grayscale
//! <root>/<video_id>/mask/000000.png    8-bit grayscale, >= 128 is mirror
//! <root>/<split>.tsv                   `video_id<TAB>num_frames` per line
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{ImageBuffer, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::interp_taps;

/// Channel-major `C×H×W` float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Image {
        if (oh, ow) == (self.height, self.width) {
            return self.clone();
        }
        let rows = interp_taps(self.height, oh);
        let cols = interp_taps(self.width, ow);
        let mut tmp = vec![0f64; self.height * ow];
        let mut out = Image::zeros(self.channels, oh, ow);
        for c in 0..self.channels {
            let src = self.plane(c);
            for y in 0..self.height {
                let line = &src[y * self.width..(y + 1) * self.width];
                for (ox, &(i0, w0, i1, w1)) in cols.iter().enumerate() {
                    tmp[y * ow + ox] = w0 * line[i0] as f64 + w1 * line[i1] as f64;
                }
            }
            for (oy, &(i0, w0, i1, w1)) in rows.iter().enumerate() {
                for ox in 0..ow {
                    let v = w0 * tmp[i0 * ow + ox] + w1 * tmp[i1 * ow + ox];
                    out.set(c, oy, ox, v as f32);
                }
            }
        }
        out
    }

    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Image {
        let mut out = Image::zeros(self.channels, oh, ow);
        for c in 0..self.channels {
            for oy in 0..oh {
                let sy = ((oy * self.height) / oh).min(self.height - 1);
                for ox in 0..ow {
                    let sx = ((ox * self.width) / ow).min(self.width - 1);
                    out.set(c, oy, ox, self.get(c, sy, sx));
                }
            }
        }
        out
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (1, self.channels, self.height, self.width),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let (c, h, w) = match t.dims() {
            [1, c, h, w] | [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            d => return Err(Error::Shape(format!("cannot view {d:?} as an image"))),
        };
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Image {
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }
}

/// Three registered RGB-D frames `(t-1, t, n)` with ground-truth masks.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub rgb: [Image; 3],
    pub depth: [Image; 3],
    pub gt: [Image; 3],
    /// `(t-1, t, n)`.
    pub indices: [usize; 3],
    /// Set per frame by [`prepare_inputs`] when the depth map was constant.
    pub constant_depth: [bool; 3],
}

impl VideoClip {
    pub fn height(&self) -> usize {
        self.rgb[0].height
    }

    pub fn width(&self) -> usize {
        self.rgb[0].width
    }

    pub fn center(&self) -> usize {
        self.indices[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for i in 0..3 {
            let checks = [
                (&self.rgb[i], 3, "rgb"),
                (&self.depth[i], 1, "depth"),
                (&self.gt[i], 1, "gt"),
            ];
            for (img, ch, name) in checks {
                if img.channels != ch || img.height != h || img.width != w {
                    return Err(Error::Shape(format!(
                        "{name}[{i}] is {}x{}x{}, expected {ch}x{h}x{w}",
                        img.channels, img.height, img.width
                    )));
                }
            }
            if self.rgb[i].data.iter().any(|v| !(0.0..=1.0).contains(v))
                || self.depth[i].data.iter().any(|v| !(0.0..=1.0).contains(v))
            {
                return Err(Error::Invalid(format!("frame {i} has values outside [0, 1]")));
            }
            if self.gt[i].data.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Invalid(format!("gt[{i}] is not binary")));
            }
        }
        let [prev, t, n] = self.indices;
        if t < 1 || prev != t - 1 || n.abs_diff(t) < 2 {
            return Err(Error::Invalid(format!("bad frame indices {:?}", self.indices)));
        }
        Ok(())
    }
}

/// Draws the distant frame uniformly from `{n : |n - t| >= 2}`.
pub fn distant_frame(len: usize, t: usize, rng: &mut impl Rng) -> Option<usize> {
    let candidates: Vec<usize> = (0..len).filter(|&n| n.abs_diff(t) >= 2).collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.random_range(0..candidates.len())])
    }
}

fn clip_rng(seed: u64, video_id: &str, t: usize) -> ChaCha8Rng {
    // FNV-1a over the id, mixed with the seed and frame index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in video_id.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn frame_path(root: &Path, video_id: &str, stream: &str, index: usize) -> PathBuf {
    root.join(video_id).join(stream).join(format!("{index:06}.png"))
}

/// Number of frames of a video on disk (contiguous `rgb/%06d.png` files from 0).
pub fn video_length(root: &Path, video_id: &str) -> Result<usize> {
    let dir = root.join(video_id).join("rgb");
    let entries = fs::read_dir(&dir).map_err(|e| Error::Load {
        path: dir.clone(),
        reason: e.to_string(),
    })?;
    let count = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .count();
    Ok(count)
}

fn load_err(path: &Path, reason: impl ToString) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(load_err(path, "missing frame file"));
    }
    image::open(path).map_err(|e| load_err(path, e))
}

pub fn load_rgb(path: &Path) -> Result<Image> {
    let img = open_png(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::zeros(3, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
        }
    }
    Ok(out)
}

pub fn load_depth(path: &Path) -> Result<Image> {
    let img = open_png(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p[0] as f32 / 65535.0).collect();
    Ok(Image {
        channels: 1,
        height: h,
        width: w,
        data,
    })
}

pub fn load_mask(path: &Path) -> Result<Image> {
    let img = open_png(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| if p[0] >= 128 { 1.0 } else { 0.0 })
        .collect();
    Ok(Image {
        channels: 1,
        height: h,
        width: w,
        data,
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb(img: &Image, path: &Path) -> Result<()> {
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(img.width as u32, img.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(img.get(0, y, x)), to_u8(img.get(1, y, x)), to_u8(img.get(2, y, x))])
    });
    buf.save(path)?;
    Ok(())
}

pub fn save_depth(img: &Image, path: &Path) -> Result<()> {
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(img.width as u32, img.height as u32, |x, y| {
        let v = img.get(0, y as usize, x as usize).clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    buf.save(path)?;
    Ok(())
}

/// Saves a single-channel map in `[0, 1]` as an 8-bit PNG.
pub fn save_gray(img: &Image, path: &Path) -> Result<()> {
    let buf = ImageBuffer::<Luma<u8>, _>::from_fn(img.width as u32, img.height as u32, |x, y| {
        Luma([to_u8(img.get(0, y as usize, x as usize))])
    });
    buf.save(path)?;
    Ok(())
}

struct RawFrame {
    rgb: Image,
    depth: Image,
    gt: Image,
}

fn load_frame(root: &Path, video_id: &str, index: usize) -> Result<RawFrame> {
    let rgb_path = frame_path(root, video_id, "rgb", index);
    let depth_path = frame_path(root, video_id, "depth", index);
    let mask_path = frame_path(root, video_id, "mask", index);
    let rgb = load_rgb(&rgb_path)?;
    let depth = load_depth(&depth_path)?;
    let gt = load_mask(&mask_path)?;
    for (img, path) in [(&depth, &depth_path), (&gt, &mask_path)] {
        if (img.height, img.width) != (rgb.height, rgb.width) {
            return Err(load_err(
                path,
                format!(
                    "dimensions {}x{} do not match rgb {}x{}",
                    img.width, img.height, rgb.width, rgb.height
                ),
            ));
        }
    }
    Ok(RawFrame { rgb, depth, gt })
}

/// Loads frames `t-1`, `t` and one distant frame of a video.
pub fn sample_clip(root: &Path, video_id: &str, t: usize, seed: u64) -> Result<VideoClip> {
    let len = video_length(root, video_id)?;
    let video_dir = root.join(video_id);
    if len < 3 {
        return Err(load_err(&video_dir, format!("video has {len} frames, need at least 3")));
    }
    if t < 1 || t >= len {
        return Err(load_err(&video_dir, format!("center frame {t} outside 1..{len}")));
    }
    let mut rng = clip_rng(seed, video_id, t);
    let n = distant_frame(len, t, &mut rng).ok_or_else(|| {
        load_err(&video_dir, format!("no frame at distance >= 2 from {t} in {len} frames"))
    })?;
    let indices = [t - 1, t, n];
    let frames = indices
        .iter()
        .map(|&i| load_frame(root, video_id, i))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (frames[0].rgb.height, frames[0].rgb.width);
    for (f, &i) in frames.iter().zip(&indices) {
        if (f.rgb.height, f.rgb.width) != (h, w) {
            return Err(load_err(
                &frame_path(root, video_id, "rgb", i),
                "frame size differs from the rest of the clip",
            ));
        }
    }
    let mut it = frames.into_iter();
    let (a, b, c) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    Ok(VideoClip {
        rgb: [a.rgb, b.rgb, c.rgb],
        depth: [a.depth, b.depth, c.depth],
        gt: [a.gt, b.gt, c.gt],
        indices,
        constant_depth: [false; 3],
    })
}

fn check_target(target: usize) -> Result<()> {
    if target < 16 || target % 16 != 0 {
        return Err(Error::Config(format!(
            "input side {target} must be >= 16 and divisible by 16"
        )));
    }
    Ok(())
}

/// Resizes one RGB/depth pair to `target×target` and min-max normalizes the depth.
/// The flag is set when the depth map was constant (it then becomes 0.5).
pub fn prepare_frame(rgb: &Image, depth: &Image, target: usize) -> Result<(Image, Image, bool)> {
    check_target(target)?;
    let mut rgb = rgb.resize_bilinear(target, target);
    for v in &mut rgb.data {
        *v = v.clamp(0.0, 1.0);
    }
    let mut depth = depth.resize_bilinear(target, target);
    let (lo, hi) = depth.min_max();
    let constant = hi <= lo;
    if constant {
        depth.data.fill(0.5);
    } else {
        let span = hi - lo;
        for v in &mut depth.data {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
    }
    Ok((rgb, depth, constant))
}

/// Resizes to `target×target` (bilinear for RGB/depth, nearest for masks) and min-max
/// normalizes each depth frame. Constant depth frames become 0.5 and are flagged.
pub fn prepare_inputs(clip: &VideoClip, target: usize) -> Result<VideoClip> {
    check_target(target)?;
    let mut out = clip.clone();
    for i in 0..3 {
        let (rgb, depth, constant) = prepare_frame(&clip.rgb[i], &clip.depth[i], target)?;
        if constant {
            log::warn!("frame {} has constant depth; using 0.5", clip.indices[i]);
        }
        out.rgb[i] = rgb;
        out.depth[i] = depth;
        out.constant_depth[i] = constant;
        let mut gt = clip.gt[i].resize_nearest(target, target);
        for v in &mut gt.data {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
        out.gt[i] = gt;
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| load_err(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let (id, n) = line
            .split_once('\t')
            .ok_or_else(|| load_err(path, format!("line {}: expected `id<TAB>frames`", lineno + 1)))?;
        let n = n
            .trim()
            .parse()
            .map_err(|_| load_err(path, format!("line {}: bad frame count `{n}`", lineno + 1)))?;
        out.push((id.to_string(), n));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[(String, usize)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for (id, n) in entries {
        writeln!(f, "{id}\t{n}")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MirrorShape {
    Rectangle,
    Ellipse,
}

/// Parameters of a synthetic mirror scene.
#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// 1 to 3 mirrors.
    pub mirror_count: usize,
    pub shape: MirrorShape,
    /// Inclusive range of mirror side lengths in pixels.
    pub mirror_size: (usize, usize),
    /// Places a single mirror at the canvas center instead of at random.
    pub centered: bool,
    /// Offset of the reflected source region relative to the mirror; random when `None`.
    pub reflection_offset: Option<(i64, i64)>,
    /// Camera drift `(dx, dy)` in pixels per frame.
    pub drift: (i64, i64),
    /// Added to the background depth at the mirror center to form the mirror plane.
    pub depth_offset: f32,
    /// Brightness factor applied to reflected content.
    pub reflection_gain: f32,
    /// Mirror the reflected region horizontally; otherwise it is copied as is.
    pub flip_reflection: bool,
    pub noise: f32,
    pub num_frames: usize,
}

impl SceneConfig {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mirror_count: 1,
            shape: MirrorShape::Rectangle,
            mirror_size: (height / 3, height / 2),
            centered: false,
            reflection_offset: None,
            drift: (1, 0),
            depth_offset: 0.3,
            reflection_gain: 0.9,
            flip_reflection: true,
            noise: 0.02,
            num_frames: 8,
        }
    }

    fn span(&self) -> ((i64, i64), (i64, i64)) {
        let last = self.num_frames.saturating_sub(1) as i64;
        let sx = (last * self.drift.0).min(0)..=(last * self.drift.0).max(0);
        let sy = (last * self.drift.1).min(0)..=(last * self.drift.1).max(0);
        ((*sx.start(), *sx.end()), (*sy.start(), *sy.end()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.mirror_count) {
            return bad(format!("mirror count {} outside 1..=3", self.mirror_count));
        }
        if self.num_frames < 3 {
            return bad("synthetic videos need at least 3 frames".into());
        }
        let (lo, hi) = self.mirror_size;
        if lo == 0 || lo > hi {
            return bad(format!("bad mirror size range {lo}..={hi}"));
        }
        if self.centered && self.mirror_count != 1 {
            return bad("centered placement supports a single mirror".into());
        }
        let ((sx0, sx1), (sy0, sy1)) = self.span();
        let room_x = self.width as i64 - 2 - (sx1 - sx0);
        let room_y = self.height as i64 - 2 - (sy1 - sy0);
        if (hi as i64) > room_x || (hi as i64) > room_y {
            return bad(format!(
                "mirrors up to {hi}px do not stay inside a {}x{} canvas under drift {:?} over {} frames",
                self.width, self.height, self.drift, self.num_frames
            ));
        }
        if self.centered && (self.drift != (0, 0)) {
            let x0 = (self.width as i64 - hi as i64) / 2;
            let y0 = (self.height as i64 - hi as i64) / 2;
            if x0 + sx0 < 1
                || x0 + hi as i64 + sx1 > self.width as i64 - 1
                || y0 + sy0 < 1
                || y0 + hi as i64 + sy1 > self.height as i64 - 1
            {
                return bad("centered mirror leaves the canvas under drift".into());
            }
        }
        if !(self.noise >= 0.0 && self.depth_offset.is_finite() && self.reflection_gain >= 0.0) {
            return bad("noise and reflection gain must be >= 0 and depth offset finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Mirror {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    src_dx: f64,
    src_dy: f64,
    depth: f32,
}

impl Mirror {
    fn contains(&self, shape: MirrorShape, u: f64, v: f64) -> bool {
        match shape {
            MirrorShape::Rectangle => {
                u >= self.x0 && u < self.x0 + self.w && v >= self.y0 && v < self.y0 + self.h
            }
            MirrorShape::Ellipse => {
                let cx = self.x0 + self.w / 2.0;
                let cy = self.y0 + self.h / 2.0;
                let nx = (u + 0.5 - cx) / (self.w / 2.0);
                let ny = (v + 0.5 - cy) / (self.h / 2.0);
                nx * nx + ny * ny <= 1.0
            }
        }
    }
}

struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
    color: [f64; 3],
}

struct Blob {
    x: f64,
    y: f64,
    r: f64,
    color: [f64; 3],
}

/// A sampled scene: procedural background, depth plane and mirrors, in world coordinates.
pub struct SyntheticScene {
    cfg: SceneConfig,
    base: [f64; 3],
    gratings: Vec<Grating>,
    blobs: Vec<Blob>,
    depth_plane: (f64, f64, f64),
    mirrors: Vec<Mirror>,
    seed: u64,
}

impl SyntheticScene {
    pub fn sample(cfg: &SceneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let color = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random(), rng.random()];
        let base = color(&mut rng);
        let gratings = (0..3)
            .map(|_| Grating {
                fx: rng.random_range(-0.25..0.25),
                fy: rng.random_range(-0.25..0.25),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                color: color(&mut rng),
            })
            .collect();
        let blobs = (0..6)
            .map(|_| Blob {
                x: rng.random_range(-0.2 * w..1.2 * w),
                y: rng.random_range(-0.2 * h..1.2 * h),
                r: rng.random_range(0.05..0.2) * w.max(h),
                color: color(&mut rng),
            })
            .collect();
        let depth_plane = (
            rng.random_range(0.35..0.55),
            rng.random_range(-0.1..0.1) / w,
            rng.random_range(0.0..0.25) / h,
        );

        let ((sx0, sx1), (sy0, sy1)) = cfg.span();
        let mut mirrors = Vec::with_capacity(cfg.mirror_count);
        for _ in 0..cfg.mirror_count {
            let (lo, hi) = cfg.mirror_size;
            let (mw, mh) = if cfg.centered {
                (hi, hi)
            } else {
                (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
            };
            let (x0, y0) = if cfg.centered {
                ((cfg.width - mw) as i64 / 2, (cfg.height - mh) as i64 / 2)
            } else {
                let xmin = 1 - sx0;
                let xmax = cfg.width as i64 - 1 - sx1 - mw as i64;
                let ymin = 1 - sy0;
                let ymax = cfg.height as i64 - 1 - sy1 - mh as i64;
                (rng.random_range(xmin..=xmax), rng.random_range(ymin..=ymax))
            };
            let (src_dx, src_dy) = match cfg.reflection_offset {
                Some(o) => o,
                None => {
                    let side = if rng.random::<bool>() { 1 } else { -1 };
                    (side * (mw as i64 + rng.random_range(2..8)), rng.random_range(-4..=4))
                }
            };
            let dcenter = depth_plane.0
                + depth_plane.1 * (x0 as f64 + mw as f64 / 2.0)
                + depth_plane.2 * (y0 as f64 + mh as f64 / 2.0);
            mirrors.push(Mirror {
                x0: x0 as f64,
                y0: y0 as f64,
                w: mw as f64,
                h: mh as f64,
                src_dx: src_dx as f64,
                src_dy: src_dy as f64,
                depth: (dcenter as f32 + cfg.depth_offset).clamp(0.0, 1.0),
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            base,
            gratings,
            blobs,
            depth_plane,
            mirrors,
            seed,
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    fn background(&self, u: f64, v: f64) -> [f64; 3] {
        let mut c = self.base.map(|b| 0.35 + 0.3 * b);
        for g in &self.gratings {
            let s = 0.2 * (g.fx * u + g.fy * v + g.phase).sin();
            for k in 0..3 {
                c[k] += s * (g.color[k] - 0.5);
            }
        }
        for b in &self.blobs {
            let d2 = ((u - b.x).powi(2) + (v - b.y).powi(2)) / (b.r * b.r);
            let a = (-d2).exp() * 0.6;
            for k in 0..3 {
                c[k] = c[k] * (1.0 - a) + b.color[k] * a;
            }
        }
        c.map(|x| x.clamp(0.0, 1.0))
    }

    fn mirror_at(&self, u: f64, v: f64) -> Option<&Mirror> {
        self.mirrors.iter().find(|m| m.contains(self.cfg.shape, u, v))
    }

    /// Renders frame `index` as `(rgb, depth, gt)`.
    pub fn render(&self, index: usize) -> (Image, Image, Image) {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let mut rgb = Image::zeros(3, h, w);
        let mut depth = Image::zeros(1, h, w);
        let mut gt = Image::zeros(1, h, w);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(31).wrapping_add(index as u64 + 1));
        let ox = index as f64 * self.cfg.drift.0 as f64;
        let oy = index as f64 * self.cfg.drift.1 as f64;
        let noise = self.cfg.noise as f64;
        let (d0, dx, dy) = self.depth_plane;
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 - ox;
                let v = y as f64 - oy;
                let (color, d) = match self.mirror_at(u, v) {
                    Some(m) => {
                        let lu = u - m.x0;
                        let lu = if self.cfg.flip_reflection { m.w - 1.0 - lu } else { lu };
                        let su = m.x0 + m.src_dx + lu;
                        let sv = v + m.src_dy;
                        let gain = self.cfg.reflection_gain as f64;
                        (self.background(su, sv).map(|c| (gain * c).min(1.0)), m.depth as f64)
                    }
                    None => (self.background(u, v), d0 + dx * u + dy * v),
                };
                for (c, val) in color.iter().enumerate() {
                    let n = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
                    rgb.set(c, y, x, (val + n).clamp(0.0, 1.0) as f32);
                }
                let n = if noise > 0.0 { rng.random_range(-noise..=noise) * 0.5 } else { 0.0 };
                depth.set(0, y, x, (d + n).clamp(0.0, 1.0) as f32);
                if self.mirror_at(u, v).is_some() {
                    gt.set(0, y, x, 1.0);
                }
            }
        }
        (rgb, depth, gt)
    }

    pub fn clip(&self, indices: [usize; 3]) -> VideoClip {
        let [a, b, c] = indices.map(|i| self.render(i));
        VideoClip {
            rgb: [a.0, b.0, c.0],
            depth: [a.1, b.1, c.1],
            gt: [a.2, b.2, c.2],
            indices,
            constant_depth: [false; 3],
        }
    }
}

/// Samples a scene and a `(t-1, t, n)` triple from it.
pub fn synthesize_clip(cfg: &SceneConfig, seed: u64) -> Result<VideoClip> {
    let scene = SyntheticScene::sample(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c11f);
    let t = rng.random_range(1..cfg.num_frames);
    let n = distant_frame(cfg.num_frames, t, &mut rng)
        .ok_or_else(|| Error::Config("video too short for a distant frame".into()))?;
    Ok(scene.clip([t - 1, t, n]))
}

/// Writes every frame of a synthetic video under `<root>/<video_id>/`.
pub fn write_synthetic_video(root: &Path, video_id: &str, scene: &SyntheticScene) -> Result<()> {
    for stream in ["rgb", "depth", "mask"] {
        fs::create_dir_all(root.join(video_id).join(stream))?;
    }
    for i in 0..scene.config().num_frames {
        let (rgb, depth, gt) = scene.render(i);
        save_rgb(&rgb, &frame_path(root, video_id, "rgb", i))?;
        save_depth(&depth, &frame_path(root, video_id, "depth", i))?;
        save_gray(&gt, &frame_path(root, video_id, "mask", i))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered_cfg() -> SceneConfig {
        let mut cfg = SceneConfig::new(128, 128);
        cfg.mirror_size = (32, 32);
        cfg.centered = true;
        cfg.drift = (0, 0);
        cfg
    }

    #[test]
    fn centered_square_mirror_area() {
        let clip = synthesize_clip(&centered_cfg(), 3).unwrap();
        clip.validate().unwrap();
        for gt in &clip.gt {
            assert_eq!(gt.count_positive(), 1024);
        }
    }

    #[test]
    fn drift_translates_masks() {
        let mut cfg = SceneConfig::new(64, 64);
        cfg.drift = (2, 0);
        let scene = SyntheticScene::sample(&cfg, 11).unwrap();
        let (_, _, prev) = scene.render(4);
        let (_, _, cur) = scene.render(5);
        for y in 0..64 {
            for x in 0..64 {
                let expected = if x >= 2 { prev.get(0, y, x - 2) } else { 0.0 };
                assert_eq!(cur.get(0, y, x), expected, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn synthesis_is_seed_deterministic() {
        let cfg = SceneConfig::new(64, 64);
        let a = synthesize_clip(&cfg, 1).unwrap();
        let b = synthesize_clip(&cfg, 1).unwrap();
        let c = synthesize_clip(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.gt, c.gt);
    }

    #[test]
    fn mirrors_stay_inside_under_drift() {
        let mut cfg = SceneConfig::new(64, 64);
        cfg.mirror_count = 3;
        cfg.mirror_size = (8, 16);
        cfg.drift = (3, -1);
        for seed in 0..20 {
            let scene = SyntheticScene::sample(&cfg, seed).unwrap();
            for i in 0..cfg.num_frames {
                let (_, _, gt) = scene.render(i);
                for y in 0..64 {
                    for x in 0..64 {
                        if x == 0 || y == 0 || x == 63 || y == 63 {
                            assert_eq!(gt.get(0, y, x), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn ellipse_mirror_is_nonempty() {
        let mut cfg = SceneConfig::new(64, 64);
        cfg.shape = MirrorShape::Ellipse;
        let clip = synthesize_clip(&cfg, 5).unwrap();
        assert!(clip.gt[1].count_positive() > 0);
        clip.validate().unwrap();
    }

    #[test]
    fn invalid_scene_configs_are_rejected() {
        let mut cfg = SceneConfig::new(32, 32);
        cfg.mirror_count = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = SceneConfig::new(32, 32);
        cfg.mirror_size = (30, 31);
        assert!(cfg.validate().is_err());
        let mut cfg = SceneConfig::new(32, 32);
        cfg.drift = (10, 0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn distant_frame_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..500 {
            let n = distant_frame(10, 5, &mut rng).unwrap();
            assert!(n.abs_diff(5) >= 2);
            seen.insert(n);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3, 7, 8, 9]);
        assert_eq!(distant_frame(3, 1, &mut rng), None);
        assert_eq!(distant_frame(3, 2, &mut rng), Some(0));
    }

    #[test]
    fn depth_midpoint_normalizes_to_half() {
        let mut clip = synthesize_clip(&SceneConfig::new(32, 32), 0).unwrap();
        let mut d = Image::filled(1, 32, 32, 3.0);
        d.set(0, 0, 0, 2.0);
        d.set(0, 1, 1, 4.0);
        clip.depth[1] = d;
        let p = prepare_inputs(&clip, 32).unwrap();
        assert_eq!(p.depth[1].get(0, 5, 5), 0.5);
        assert_eq!(p.depth[1].get(0, 0, 0), 0.0);
        assert_eq!(p.depth[1].get(0, 1, 1), 1.0);
    }

    #[test]
    fn constant_depth_is_flagged() {
        let mut clip = synthesize_clip(&SceneConfig::new(32, 32), 0).unwrap();
        clip.depth[0] = Image::filled(1, 32, 32, 0.7);
        let p = prepare_inputs(&clip, 32).unwrap();
        assert_eq!(p.constant_depth, [true, false, false]);
        assert!(p.depth[0].data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn prepare_resizes_and_is_idempotent() {
        let mut cfg = SceneConfig::new(48, 64);
        cfg.mirror_size = (10, 14);
        let clip = synthesize_clip(&cfg, 9).unwrap();
        let p = prepare_inputs(&clip, 32).unwrap();
        p.validate().unwrap();
        assert_eq!((p.height(), p.width()), (32, 32));
        let q = prepare_inputs(&p, 32).unwrap();
        for i in 0..3 {
            for (a, b) in p.rgb[i].data.iter().zip(&q.rgb[i].data) {
                assert!((a - b).abs() <= 1e-6);
            }
            for (a, b) in p.depth[i].data.iter().zip(&q.depth[i].data) {
                assert!((a - b).abs() <= 1e-6);
            }
            assert_eq!(p.gt[i], q.gt[i]);
        }
        assert!(prepare_inputs(&clip, 40).is_err());
        assert!(prepare_inputs(&clip, 8).is_err());
    }
}
