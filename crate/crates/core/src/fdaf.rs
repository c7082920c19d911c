//! Frequency detail attention fusion.
//!
//! Each low-level token is transformed along its channel axis with a real FFT; magnitude and
//! phase of the non-redundant bins are projected to the memory width and used as keys and
//! values for multi-head cross-attention from the memory tokens, followed by a residual
//! feed-forward `mem + φ(attn)`.

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{shape_err, Error, Result};
use crate::nn::{atan2, from_tokens, hypot, sigmoid, to_tokens, Attention, Conv2d, Init, LayerNorm, Linear};

#[derive(Clone, Debug)]
pub struct MemoryTokens {
    /// `[B, N₂, d]`.
    pub values: Tensor,
}

#[derive(Clone, Debug)]
pub struct SpectralFeature {
    /// `[B, N₁, ⌊C/2⌋+1]`, non-negative.
    pub magnitude: Tensor,
    /// `[B, N₁, ⌊C/2⌋+1]`, in `(-π, π]`.
    pub phase: Tensor,
}

#[derive(Clone, Debug)]
pub struct IntermediatePrediction {
    /// Logits `[B, 1, H', W']`.
    pub map: Tensor,
    /// `sigmoid(map)`.
    pub freq_map: Tensor,
}

pub fn num_bins(channels: usize) -> usize {
    channels / 2 + 1
}

/// Real-input FFT over the last axis, emitting `[re_0..re_K, im_0..im_K]`.
struct RealFft {
    len: usize,
}

impl RealFft {
    fn transform(&self, input: &[f64], out: &mut Vec<f64>) {
        let c = self.len;
        let k = num_bins(c);
        let fft = FftPlanner::<f64>::new().plan_fft_forward(c);
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); c];
        for row in input.chunks_exact(c) {
            for (b, &v) in buf.iter_mut().zip(row) {
                *b = Complex::new(v, 0.0);
            }
            fft.process(&mut buf);
            out.extend(buf[..k].iter().map(|z| z.re));
            out.extend(buf[..k].iter().enumerate().map(|(i, z)| {
                // DC and Nyquist bins of a real signal are purely real
                if i == 0 || 2 * i == c {
                    0.0
                } else {
                    z.im
                }
            }));
        }
    }
}

impl CustomOp1 for RealFft {
    fn name(&self) -> &'static str {
        "real-fft"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        let Some((&c, lead)) = dims.split_last() else {
            candle_core::bail!("real-fft needs at least one dimension")
        };
        if c != self.len {
            candle_core::bail!("real-fft planned for {} channels, got {c}", self.len);
        }
        let Some((a, b)) = layout.contiguous_offsets() else {
            candle_core::bail!("real-fft expects a contiguous input")
        };
        let mut out_dims = lead.to_vec();
        out_dims.push(2 * num_bins(c));
        let rows = lead.iter().product::<usize>();
        let mut out = Vec::with_capacity(rows * 2 * num_bins(c));
        let storage = match storage {
            CpuStorage::F64(v) => {
                self.transform(&v[a..b], &mut out);
                CpuStorage::F64(out)
            }
            CpuStorage::F32(v) => {
                let wide: Vec<f64> = v[a..b].iter().map(|&x| x as f64).collect();
                self.transform(&wide, &mut out);
                CpuStorage::F32(out.into_iter().map(|x| x as f32).collect())
            }
            _ => candle_core::bail!("real-fft: unsupported dtype"),
        };
        Ok((storage, Shape::from(out_dims)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let c = self.len;
        let k = num_bins(c);
        let (cos, sin) = dft_bases(c, arg.dtype(), arg.device())?;
        let g_re = grad.narrow(D::Minus1, 0, k)?;
        let g_im = grad.narrow(D::Minus1, k, k)?;
        // re_k = Σ x_c cos(2πkc/C), im_k = -Σ x_c sin(2πkc/C)
        let dx = (g_re.broadcast_matmul(&cos.t()?)? - g_im.broadcast_matmul(&sin.t()?)?)?;
        Ok(Some(dx))
    }
}

/// `[C, K]` cosine and sine tables, `cos(2πkc/C)` and `sin(2πkc/C)`.
pub fn dft_bases(c: usize, dtype: DType, dev: &candle_core::Device) -> candle_core::Result<(Tensor, Tensor)> {
    let k = num_bins(c);
    let mut cos = Vec::with_capacity(c * k);
    let mut sin = Vec::with_capacity(c * k);
    for ci in 0..c {
        for ki in 0..k {
            let a = std::f64::consts::TAU * (ki * ci % c) as f64 / c as f64;
            cos.push(a.cos());
            sin.push(a.sin());
        }
    }
    Ok((
        Tensor::from_vec(cos, (c, k), dev)?.to_dtype(dtype)?,
        Tensor::from_vec(sin, (c, k), dev)?.to_dtype(dtype)?,
    ))
}

pub fn channel_fft(f_low: &Tensor) -> Result<SpectralFeature> {
    let c = f_low.dim(D::Minus1)?;
    if c < 2 {
        return shape_err(format!("channel FFT needs at least 2 channels, got {c}"));
    }
    let k = num_bins(c);
    let spectrum = f_low.contiguous()?.apply_op1_arc(Arc::new(Box::new(RealFft { len: c })))?;
    let re = spectrum.narrow(D::Minus1, 0, k)?;
    let im = spectrum.narrow(D::Minus1, k, k)?;
    Ok(SpectralFeature {
        magnitude: hypot(&re, &im)?,
        phase: atan2(&im, &re)?,
    })
}

#[derive(Clone, Debug)]
pub struct Fdaf {
    memory_proj: Linear,
    spectral_proj: Linear,
    attention: Attention,
    ffn_norm: LayerNorm,
    ffn_out: Linear,
    head: Conv2d,
    detach_residual: bool,
}

impl Fdaf {
    pub fn new(init: &mut Init, c_low: usize, c_high: usize, width: usize, heads: usize) -> Result<Self> {
        if width % heads != 0 {
            return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            memory_proj: Linear::new(init, "memory_proj", c_high, width, true)?,
            spectral_proj: Linear::new(init, "spectral_proj", 2 * num_bins(c_low), width, true)?,
            attention: Attention::new(init, "attn", width, heads)?,
            ffn_norm: LayerNorm::new(init, "ffn_norm", width)?,
            ffn_out: Linear::new(init, "ffn_out", width, width, true)?,
            head: Conv2d::new(init, "inter_head", c_low, 1, 1, 1, true)?,
            detach_residual: false,
        })
    }

    /// Regression fixture: cuts the gradient of the residual branch.
    #[doc(hidden)]
    pub fn with_detached_residual(mut self, on: bool) -> Self {
        self.detach_residual = on;
        self
    }

    pub fn ffn_out(&self) -> &Linear {
        &self.ffn_out
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    /// Memory tokens from the flattened high-level fused feature.
    pub fn memory_tokens(&self, fused_high: &Tensor) -> Result<MemoryTokens> {
        Ok(MemoryTokens {
            values: self.memory_proj.forward(&to_tokens(fused_high)?)?,
        })
    }

    fn feed_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.ffn_out.forward(&self.ffn_norm.forward(x)?.gelu_erf()?)
    }

    /// Returns the updated memory and the attention weights `[B, heads, N₂, N₁]`.
    pub fn frequency_cross_attention_with_weights(
        &self,
        mem: &MemoryTokens,
        spec: &SpectralFeature,
    ) -> Result<(MemoryTokens, Tensor)> {
        let n1 = spec.magnitude.dim(1)?;
        if n1 == 0 {
            return Err(Error::Invalid("frequency cross-attention needs at least one key token".into()));
        }
        let kv = self
            .spectral_proj
            .forward(&Tensor::cat(&[&spec.magnitude, &spec.phase], D::Minus1)?)?;
        let (attended, weights) = self.attention.forward_with_weights(&mem.values, &kv, &kv)?;
        let residual = if self.detach_residual {
            mem.values.detach()
        } else {
            mem.values.clone()
        };
        let values = (residual + self.feed_forward(&attended)?)?;
        Ok((MemoryTokens { values }, weights))
    }

    pub fn frequency_cross_attention(&self, mem: &MemoryTokens, spec: &SpectralFeature) -> Result<MemoryTokens> {
        Ok(self.frequency_cross_attention_with_weights(mem, spec)?.0)
    }

    pub fn intermediate_prediction(&self, fused_low: &Tensor) -> Result<IntermediatePrediction> {
        let map = self.head.forward(fused_low)?;
        let freq_map = sigmoid(&map)?;
        Ok(IntermediatePrediction { map, freq_map })
    }

    /// Full module: `(F̂_fused, P)` from the low- and high-level fused features.
    pub fn forward(&self, fused_low: &Tensor, fused_high: &Tensor) -> Result<(MemoryTokens, IntermediatePrediction)> {
        let inter = self.intermediate_prediction(fused_low)?;
        let spec = channel_fft(&to_tokens(fused_low)?)?;
        let mem = self.memory_tokens(fused_high)?;
        let enhanced = self.frequency_cross_attention(&mem, &spec)?;
        Ok((enhanced, inter))
    }
}

/// Reshapes enhanced memory tokens back to the high-level grid `[B, d, H_h, W_h]`.
pub fn memory_to_map(mem: &MemoryTokens, h: usize, w: usize) -> Result<Tensor> {
    from_tokens(&mem.values, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{check_inputs, random_projection, seeded_normal};
    use crate::nn::ParamStore;
    use candle_core::Device;

    fn vec(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn constant_token_is_dc_only() {
        let f = (Tensor::ones((1, 1, 8), DType::F64, &Device::Cpu).unwrap() * 1.5).unwrap();
        let s = channel_fft(&f).unwrap();
        let m = vec(&s.magnitude);
        assert!((m[0] - 12.0).abs() < 1e-12);
        assert!(m[1..].iter().all(|v| v.abs() < 1e-12));
        assert_eq!(vec(&s.phase)[0], 0.0);
        let neg = channel_fft(&(f * -1.0).unwrap()).unwrap();
        assert_eq!(vec(&neg.phase)[0], std::f64::consts::PI);
    }

    #[test]
    fn cosine_token_concentrates_on_its_bin() {
        let c = 16;
        for k in 1..c / 2 {
            let v: Vec<f64> = (0..c)
                .map(|i| (std::f64::consts::TAU * (k * i) as f64 / c as f64).cos())
                .collect();
            let s = channel_fft(&Tensor::from_vec(v, (1, 1, c), &Device::Cpu).unwrap()).unwrap();
            let m = vec(&s.magnitude);
            for (bin, &val) in m.iter().enumerate() {
                if bin == k {
                    assert!((val - c as f64 / 2.0).abs() < 1e-9);
                } else {
                    assert!(val <= 1e-6, "bin {bin} = {val}");
                }
            }
        }
    }

    #[test]
    fn too_few_channels() {
        let f = Tensor::ones((1, 2, 1), DType::F64, &Device::Cpu).unwrap();
        assert!(channel_fft(&f).is_err());
    }

    fn module(seed: u64) -> (ParamStore, Fdaf) {
        let mut ps = ParamStore::new(DType::F64, seed);
        let m = Fdaf::new(&mut ps.root().pp("fdaf"), 8, 12, 16, 4).unwrap();
        (ps, m)
    }

    fn inputs() -> (MemoryTokens, SpectralFeature) {
        let mem = MemoryTokens {
            values: seeded_normal((1, 4, 16), 1, DType::F64).unwrap(),
        };
        let spec = channel_fft(&seeded_normal((1, 9, 8), 2, DType::F64).unwrap()).unwrap();
        (mem, spec)
    }

    #[test]
    fn zeroed_output_projection_is_identity() {
        let (ps, m) = module(0);
        for name in ["fdaf.ffn_out.weight", "fdaf.ffn_out.bias"] {
            let v = ps.get(name).unwrap();
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let (mem, spec) = inputs();
        let out = m.frequency_cross_attention(&mem, &spec).unwrap();
        assert_eq!(vec(&out.values), vec(&mem.values));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (_, m) = module(1);
        let (mem, spec) = inputs();
        let (_, w) = m.frequency_cross_attention_with_weights(&mem, &spec).unwrap();
        assert_eq!(w.dims(), &[1, 4, 4, 9]);
        for s in vec(&w.sum(D::Minus1).unwrap()) {
            assert!((s - 1.0).abs() <= 1e-6);
        }
        let single = channel_fft(&seeded_normal((1, 1, 8), 3, DType::F64).unwrap()).unwrap();
        let (_, w) = m.frequency_cross_attention_with_weights(&mem, &single).unwrap();
        assert!(vec(&w).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn key_permutation_invariance() {
        let (_, m) = module(2);
        let (mem, spec) = inputs();
        let perm = Tensor::new(&[3u32, 0, 8, 1, 5, 2, 7, 4, 6], &Device::Cpu).unwrap();
        let permuted = SpectralFeature {
            magnitude: spec.magnitude.index_select(&perm, 1).unwrap(),
            phase: spec.phase.index_select(&perm, 1).unwrap(),
        };
        let a = vec(&m.frequency_cross_attention(&mem, &spec).unwrap().values);
        let b = vec(&m.frequency_cross_attention(&mem, &permuted).unwrap().values);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_head() {
        let (ps, m) = module(3);
        let w = ps.get("fdaf.inter_head.weight").unwrap();
        w.set(&w.zeros_like().unwrap()).unwrap();
        let b = ps.get("fdaf.inter_head.bias").unwrap();
        b.set(&Tensor::new(&[0.7f64], &Device::Cpu).unwrap()).unwrap();
        let p = m.intermediate_prediction(&seeded_normal((1, 8, 5, 6), 4, DType::F64).unwrap()).unwrap();
        assert_eq!(p.map.dims(), &[1, 1, 5, 6]);
        assert!(vec(&p.map).iter().all(|&v| v == 0.7));
        let s = 1.0 / (1.0 + (-0.7f64).exp());
        assert!(vec(&p.freq_map).iter().all(|&v| (v - s).abs() < 1e-15));
    }

    #[test]
    fn gradients_match_and_broken_residual_is_caught() {
        let (_, m) = module(4);
        let fused_low = seeded_normal((1, 8, 4, 4), 5, DType::F64).unwrap();
        let fused_high = seeded_normal((1, 12, 2, 2), 6, DType::F64).unwrap();
        let run = |m: &Fdaf| {
            check_inputs(
                &[fused_low.clone(), fused_high.clone()],
                |x| {
                    let (mem, p) = m.forward(&x[0], &x[1])?;
                    Ok((random_projection(&mem.values, 1)? + random_projection(&p.map, 2)?)?)
                },
                3,
                1e-5,
                17,
            )
            .unwrap()
        };
        let ok = run(&m);
        assert!(ok <= 1e-3, "rel err {ok}");
        let broken = run(&m.clone().with_detached_residual(true));
        assert!(broken > 1e-3, "broken residual went unnoticed ({broken})");
    }
}
