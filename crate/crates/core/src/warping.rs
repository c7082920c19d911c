//! Depth warping: bidirectional RGB/depth correlation, correlation compression and fusion,
//! and a pixel-adaptive-convolution decoder guided by the refined depth feature.

use candle_core::{Tensor, D};

use crate::error::{shape_err, Result};
use crate::nn::{resize_bilinear, shift2d, Conv2d, GroupNorm, Init};

#[derive(Clone, Debug)]
pub struct CorrelationVolume {
    /// `[B, (2r+1)², H, W]`, channel `(dy + r)·K + (dx + r)`.
    pub values: Tensor,
    pub radius: usize,
}

impl CorrelationVolume {
    pub fn window(&self) -> usize {
        2 * self.radius + 1
    }
}

#[derive(Clone, Debug)]
pub struct WarpOutputs {
    pub refined_depth: Tensor,
    pub fused: Tensor,
    pub refined_img: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Img,
    Depth,
}

/// Divides every pixel's channel vector by its L2 norm.
pub fn l2_normalize_channels(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// `out[(dy+r)K + (dx+r), p] = Σ_c a[c, p] · b[c, p + (dy, dx)]`, zero where `p + (dy, dx)`
/// leaves the map.
pub fn correlation_volume(a: &Tensor, b: &Tensor, radius: usize) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return shape_err(format!("correlation inputs {:?} vs {:?}", a.dims(), b.dims()));
    }
    let r = radius as isize;
    let mut slices = Vec::with_capacity((2 * radius + 1).pow(2));
    for dy in -r..=r {
        for dx in -r..=r {
            let shifted = shift2d(b, dy, dx)?;
            slices.push((a * shifted)?.sum_keepdim(1)?);
        }
    }
    Ok(Tensor::cat(&slices, 1)?)
}

/// Normalized feature correlated against its own ×2 average-pooled, re-upsampled copy.
fn self_correlation(f: &Tensor, radius: usize) -> Result<Tensor> {
    let (_, _, h, w) = f.dims4()?;
    let n = l2_normalize_channels(f)?;
    let coarse = if h >= 2 && w >= 2 {
        resize_bilinear(&n.avg_pool2d(2)?, h, w)?
    } else {
        n.clone()
    };
    correlation_volume(&n, &coarse, radius)
}

pub fn joint_correlation(f_img: &Tensor, f_depth: &Tensor, radius: usize) -> Result<CorrelationVolume> {
    let (bi, _, hi, wi) = f_img.dims4()?;
    let (bd, _, hd, wd) = f_depth.dims4()?;
    if (bi, hi, wi) != (bd, hd, wd) {
        return shape_err(format!(
            "image feature {:?} and depth feature {:?} differ spatially",
            f_img.dims(),
            f_depth.dims()
        ));
    }
    if radius == 0 {
        return shape_err("correlation radius must be >= 1");
    }
    let c_img = self_correlation(f_img, radius)?;
    let c_depth = self_correlation(f_depth, radius)?;
    Ok(CorrelationVolume {
        values: ((c_img + c_depth)? * 0.5)?,
        radius,
    })
}

/// Pixel-adaptive 3×3 convolution: every tap is scaled by `exp(-½‖g_p − g_q‖²)` between the
/// guidance vectors at the center `p` and tap `q`. `weight` has the usual `[Co, Ci, 3, 3]` layout.
pub fn pac_conv(x: &Tensor, guide: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, ci, h, w) = x.dims4()?;
    let (bg, _, hg, wg) = guide.dims4()?;
    if (b, h, w) != (bg, hg, wg) {
        return shape_err(format!("pac input {:?} vs guidance {:?}", x.dims(), guide.dims()));
    }
    let (co, wci, kh, kw) = weight.dims4()?;
    if (wci, kh, kw) != (ci, 3, 3) {
        return shape_err(format!("pac weight {:?} for {ci} input channels", weight.dims()));
    }
    let mut taps = Vec::with_capacity(9);
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let xs = shift2d(x, dy, dx)?;
            if dy == 0 && dx == 0 {
                taps.push(xs);
                continue;
            }
            let gs = shift2d(guide, dy, dx)?;
            let dist2 = (guide - gs)?.sqr()?.sum_keepdim(1)?;
            let affinity = (dist2 * -0.5)?.exp()?;
            taps.push(xs.broadcast_mul(&affinity)?);
        }
    }
    let cols = Tensor::stack(&taps, 2)?.reshape((b, ci * 9, h * w))?;
    let out = weight.reshape((co, ci * 9))?.broadcast_matmul(&cols)?.reshape((b, co, h, w))?;
    match bias {
        Some(bias) => Ok(out.broadcast_add(&bias.reshape((1, co, 1, 1))?)?),
        None => Ok(out),
    }
}

#[derive(Clone, Debug)]
struct Fuse {
    conv: Conv2d,
    norm: GroupNorm,
}

impl Fuse {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut init = init.pp(name);
        Ok(Self {
            conv: Conv2d::new(&mut init, "conv", cin, cout, 1, 1, true)?,
            norm: GroupNorm::new(&mut init, "norm", cout)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

#[derive(Clone, Debug)]
pub struct PacDecoder {
    guide: Conv2d,
    weight: Tensor,
    bias: Tensor,
}

impl PacDecoder {
    pub fn new(init: &mut Init, channels: usize, out_channels: usize, guide_channels: usize) -> Result<Self> {
        let guide = Conv2d::new(init, "guide", channels, guide_channels, 1, 1, true)?;
        let bound = 1.0 / ((channels * 9) as f64).sqrt();
        let weight = init.uniform("weight", (out_channels, channels, 3, 3), bound)?;
        let bias = init.uniform("bias", out_channels, bound)?;
        Ok(Self { guide, weight, bias })
    }

    pub fn guidance(&self, refined_depth: &Tensor) -> Result<Tensor> {
        self.guide.forward(refined_depth)
    }

    pub fn forward(&self, refined_img: &Tensor, refined_depth: &Tensor) -> Result<Tensor> {
        let g = self.guidance(refined_depth)?;
        pac_conv(refined_img, &g, &self.weight, Some(&self.bias))
    }
}

/// One pyramid level of the depth warping module.
#[derive(Clone, Debug)]
pub struct DepthWarpLevel {
    radius: usize,
    channels: usize,
    compress_1x1: Conv2d,
    compress_3x3: Conv2d,
    fuse_img: Fuse,
    fuse_depth: Fuse,
    decoder: PacDecoder,
}

impl DepthWarpLevel {
    pub fn new(init: &mut Init, channels: usize, radius: usize) -> Result<Self> {
        let k2 = (2 * radius + 1).pow(2);
        let c_phi = (channels / 2).max(4);
        Ok(Self {
            radius,
            channels,
            compress_1x1: Conv2d::new(&mut init.pp("phi"), "reduce", k2, c_phi, 1, 1, true)?,
            compress_3x3: Conv2d::new(&mut init.pp("phi"), "mix", c_phi, c_phi, 3, 1, true)?,
            fuse_img: Fuse::new(init, "fuse_img", channels + c_phi, channels)?,
            fuse_depth: Fuse::new(init, "fuse_depth", channels + c_phi, channels)?,
            decoder: PacDecoder::new(&mut init.pp("pac"), channels, channels, 8)?,
        })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn decoder(&self) -> &PacDecoder {
        &self.decoder
    }

    /// Correlation compression block: 1×1 conv then 3×3 conv.
    pub fn compress(&self, corr: &CorrelationVolume) -> Result<Tensor> {
        self.compress_3x3.forward(&self.compress_1x1.forward(&corr.values)?)
    }

    pub fn fuse_with_correlation(&self, f: &Tensor, corr: &CorrelationVolume, modality: Modality) -> Result<Tensor> {
        let (b, c, h, w) = f.dims4()?;
        let (bc, _, hc, wc) = corr.values.dims4()?;
        if (b, h, w) != (bc, hc, wc) || c != self.channels {
            return shape_err(format!(
                "feature {:?} incompatible with correlation {:?}",
                f.dims(),
                corr.values.dims()
            ));
        }
        let phi = self.compress(corr)?;
        self.fuse_compressed(f, &phi, modality)
    }

    fn fuse_compressed(&self, f: &Tensor, phi: &Tensor, modality: Modality) -> Result<Tensor> {
        let x = Tensor::cat(&[f, phi], 1)?;
        match modality {
            Modality::Img => self.fuse_img.forward(&x),
            Modality::Depth => self.fuse_depth.forward(&x),
        }
    }

    pub fn pac_decode(&self, refined_img: &Tensor, refined_depth: &Tensor) -> Result<Tensor> {
        self.decoder.forward(refined_img, refined_depth)
    }

    pub fn forward(&self, f_img: &Tensor, f_depth: &Tensor) -> Result<WarpOutputs> {
        let corr = joint_correlation(f_img, f_depth, self.radius)?;
        let phi = self.compress(&corr)?;
        let refined_img = self.fuse_compressed(f_img, &phi, Modality::Img)?;
        let refined_depth = self.fuse_compressed(f_depth, &phi, Modality::Depth)?;
        let fused = self.pac_decode(&refined_img, &refined_depth)?;
        Ok(WarpOutputs {
            refined_depth,
            fused,
            refined_img,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DepthWarping {
    pub low: DepthWarpLevel,
    pub high: DepthWarpLevel,
}

impl DepthWarping {
    pub fn new(init: &mut Init, c_low: usize, c_high: usize, radius_low: usize, radius_high: usize) -> Result<Self> {
        Ok(Self {
            low: DepthWarpLevel::new(&mut init.pp("low"), c_low, radius_low)?,
            high: DepthWarpLevel::new(&mut init.pp("high"), c_high, radius_high)?,
        })
    }
}

/// Maximum over the channel axis, used by tests that inspect correlation peaks.
pub fn channel_argmax(values: &Tensor) -> Result<Tensor> {
    Ok(values.argmax_keepdim(D::Minus(3))?)
}
