//! Two-stream hierarchical encoder (stand-in for a pretrained image encoder).
//!
//! Four stride-2 stages of `3×3 conv → GroupNorm → GELU`; the low tap follows stage 2
//! (stride 4) and the high tap follows stage 4 (stride 16). RGB and depth use the same
//! topology with separate weights.

use candle_core::Tensor;

use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, GroupNorm, Init};

pub const STRIDE: usize = 16;

#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// `[B, C_l, H/4, W/4]`.
    pub low: Tensor,
    /// `[B, C_h, H/16, W/16]`.
    pub high: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Rgb,
    Depth,
}

impl Stream {
    pub fn in_channels(self) -> usize {
        match self {
            Stream::Rgb => 3,
            Stream::Depth => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Depth => "depth",
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv2d,
    norm: GroupNorm,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.gelu_erf()?)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: [Stage; 4],
    in_channels: usize,
}

/// Channel widths of the four stages for the given low/high tap widths.
pub fn stage_widths(c_low: usize, c_high: usize) -> [usize; 4] {
    [(c_low / 2).max(1), c_low, (c_low + c_high) / 2, c_high]
}

impl Encoder {
    pub fn new(init: &mut Init, in_channels: usize, c_low: usize, c_high: usize) -> Result<Self> {
        let widths = stage_widths(c_low, c_high);
        let mut cin = in_channels;
        let mut stages = Vec::with_capacity(4);
        for (i, &cout) in widths.iter().enumerate() {
            let mut s = init.pp(&format!("stage{}", i + 1));
            stages.push(Stage {
                conv: Conv2d::new(&mut s, "conv", cin, cout, 3, 2, true)?,
                norm: GroupNorm::new(&mut s, "norm", cout)?,
            });
            cin = cout;
        }
        let stages: [Stage; 4] = stages.try_into().expect("four stages");
        Ok(Self {
            stages,
            in_channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return shape_err(format!("encoder expects {} channels, got {c}", self.in_channels));
        }
        if h % STRIDE != 0 || w % STRIDE != 0 || h == 0 || w == 0 {
            return shape_err(format!("input {h}x{w} is not divisible by {STRIDE}"));
        }
        let s1 = self.stages[0].forward(x)?;
        let low = self.stages[1].forward(&s1)?;
        let s3 = self.stages[2].forward(&low)?;
        let high = self.stages[3].forward(&s3)?;
        Ok(FeaturePyramid { low, high })
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    rgb: Encoder,
    depth: Encoder,
}

impl Backbone {
    /// Registers parameters under `rgb.*` and `depth.*` of `init`.
    pub fn new(init: &mut Init, c_low: usize, c_high: usize) -> Result<Self> {
        Ok(Self {
            rgb: Encoder::new(&mut init.pp("rgb"), 3, c_low, c_high)?,
            depth: Encoder::new(&mut init.pp("depth"), 1, c_low, c_high)?,
        })
    }

    pub fn extract_features(&self, images: &Tensor, stream: Stream) -> Result<FeaturePyramid> {
        match stream {
            Stream::Rgb => self.rgb.forward(images),
            Stream::Depth => self.depth.forward(images),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{central_difference, scalar, seeded_normal};
    use crate::nn::ParamStore;
    use candle_core::{DType, Device, Var};

    fn build(seed: u64) -> (ParamStore, Backbone) {
        let mut ps = ParamStore::new(DType::F64, seed);
        let bb = Backbone::new(&mut ps.root().pp("backbone"), 32, 64).unwrap();
        (ps, bb)
    }

    #[test]
    fn stride_contract() {
        let (_, bb) = build(0);
        let x = seeded_normal((1, 3, 64, 64), 0, DType::F64).unwrap();
        let f = bb.extract_features(&x, Stream::Rgb).unwrap();
        assert_eq!(f.low.dims(), &[1, 32, 16, 16]);
        assert_eq!(f.high.dims(), &[1, 64, 4, 4]);
        let d = seeded_normal((2, 1, 32, 48), 1, DType::F64).unwrap();
        let f = bb.extract_features(&d, Stream::Depth).unwrap();
        assert_eq!(f.low.dims(), &[2, 32, 8, 12]);
        assert_eq!(f.high.dims(), &[2, 64, 2, 3]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let (_, bb) = build(0);
        let x = Tensor::zeros((1, 3, 40, 64), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            bb.extract_features(&x, Stream::Rgb),
            Err(crate::Error::Shape(_))
        ));
        let x = Tensor::zeros((1, 3, 64, 64), DType::F64, &Device::Cpu).unwrap();
        assert!(bb.extract_features(&x, Stream::Depth).is_err());
    }

    #[test]
    fn streams_share_no_parameters() {
        let (ps, _) = build(0);
        let rgb = ps.vars_under("backbone.rgb.");
        let depth = ps.vars_under("backbone.depth.");
        assert!(!rgb.is_empty() && !depth.is_empty());
        for (_, a) in &rgb {
            for (_, b) in &depth {
                assert_ne!(a.as_tensor().id(), b.as_tensor().id());
            }
        }
        assert_eq!(rgb.len() + depth.len(), ps.named().len());
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let (ps, bb) = build(0);
        for (_, v) in ps.vars_under("backbone.") {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let x = seeded_normal((1, 3, 32, 32), 2, DType::F64).unwrap();
        let f = bb.extract_features(&x, Stream::Rgb).unwrap();
        let m = f.low.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (_, bb) = build(1);
        let x0 = seeded_normal((1, 3, 32, 32), 2, DType::F64).unwrap();
        let f = |x: &Tensor| -> Result<Tensor> {
            let p = bb.extract_features(x, Stream::Rgb)?;
            Ok((p.low.sum_all()? + p.high.sum_all()?)?)
        };
        let var = Var::from_tensor(&x0).unwrap();
        let g = f(var.as_tensor()).unwrap().backward().unwrap();
        let analytic = g.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for idx in [0usize, 517, 1500, 3071] {
            let numeric = central_difference(&x0, idx, 1e-5, |x| scalar(&f(x)?)).unwrap();
            let rel = (analytic[idx] - numeric).abs() / analytic[idx].abs().max(numeric.abs()).max(1e-8);
            assert!(rel <= 1e-3, "pixel {idx}: analytic {} numeric {numeric}", analytic[idx]);
        }
    }
}
