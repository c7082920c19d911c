//! Small layer library on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names (`backbone.rgb.stage1.conv.weight`).
//! Initialization draws from a seeded ChaCha stream in name-registration order, so two stores
//! built with the same seed and the same architecture are bit-identical.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Init<'_> {
        Init {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn named(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_under(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn register(&mut self, name: String, values: Vec<f64>, shape: Shape) -> Result<Tensor> {
        assert!(
            !self.vars.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }
}

/// Scoped view into a [`ParamStore`] that prefixes every registered name.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Init<'_> {
    pub fn pp(&mut self, name: &str) -> Init<'_> {
        Init {
            prefix: self.full(name),
            store: self.store,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform<S: Into<Shape>>(&mut self, name: &str, shape: S, bound: f64) -> Result<Tensor> {
        let shape = shape.into();
        let values = (0..shape.elem_count())
            .map(|_| self.store.rng.random_range(-bound..=bound))
            .collect();
        self.store.register(self.full(name), values, shape)
    }

    pub fn constant<S: Into<Shape>>(&mut self, name: &str, shape: S, value: f64) -> Result<Tensor> {
        let shape = shape.into();
        let values = vec![value; shape.elem_count()];
        self.store.register(self.full(name), values, shape)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// `k`×`k` convolution with "same" padding (`k/2`).
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let mut init = init.pp(name);
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let weight = init.uniform("weight", (cout, cin, k, k), bound)?;
        let bias = if bias {
            Some(init.uniform("bias", cout, bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let mut init = init.pp(name);
        let bound = 1.0 / (din as f64).sqrt();
        let weight = init.uniform("weight", (dout, din), bound)?;
        let bias = if bias {
            Some(init.uniform("bias", dout, bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Linear layer whose weight and bias start at zero.
    pub fn zeros(init: &mut Init, name: &str, din: usize, dout: usize) -> Result<Self> {
        let mut init = init.pp(name);
        let weight = init.constant("weight", (dout, din), 0.0)?;
        let bias = Some(init.constant("bias", dout, 0.0)?);
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let mut init = init.pp(name);
        let groups = (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1);
        Ok(Self {
            gamma: init.constant("weight", channels, 1.0)?,
            beta: init.constant("bias", channels, 0.0)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let normed = standardize_last(&g, 1e-5)?.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        let mut init = init.pp(name);
        Ok(Self {
            gamma: init.constant("weight", dim, 1.0)?,
            beta: init.constant("bias", dim, 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(standardize_last(x, 1e-5)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

fn standardize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Numerically stable softmax. The subtracted maximum is detached: it cancels analytically.
pub fn softmax(x: &Tensor, dim: D) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

/// `σ(x) = (1 + tanh(x/2)) / 2`; unlike `1 / (1 + e^{-x})` its gradient stays finite for
/// large negative `x` in 32-bit.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x * 0.5)?.tanh()?.affine(0.5, 0.5)?)
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        assert!(dim % heads == 0, "width {dim} not divisible by {heads} heads");
        let mut init = init.pp(name);
        Ok(Self {
            q: Linear::new(&mut init, "q", dim, dim, true)?,
            k: Linear::new(&mut init, "k", dim, dim, true)?,
            v: Linear::new(&mut init, "v", dim, dim, true)?,
            out: Linear::new(&mut init, "out", dim, dim, true)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Returns the attended output `[B, Nq, D]` and the weights `[B, heads, Nq, Nk]`.
    pub fn forward_with_weights(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (b, nq, d) = q.dims3()?;
        let qh = self.split(&self.q.forward(q)?)?;
        let kh = self.split(&self.k.forward(k)?)?;
        let vh = self.split(&self.v.forward(v)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let logits = (qh.matmul(&kh.t()?.contiguous()?)? * scale)?;
        let weights = softmax(&logits, D::Minus1)?;
        let mixed = weights
            .matmul(&vh)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, d))?;
        Ok((self.out.forward(&mixed)?, weights))
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(q, k, v)?.0)
    }
}

/// Two-tap bilinear weights `(i0, w0, i1, w1)` per output sample, with half-pixel centers and
/// edge clamping (the `align_corners = false` convention).
pub fn interp_taps(input: usize, output: usize) -> Vec<(usize, f64, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, 1.0 - frac, i1, frac)
        })
        .collect()
}

/// Row-major `[output, input]` matrix form of [`interp_taps`].
pub fn interp_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; input * output];
    for (o, (i0, w0, i1, w1)) in interp_taps(input, output).into_iter().enumerate() {
        m[o * input + i0] += w0;
        m[o * input + i1] += w1;
    }
    m
}

/// Bilinear resize of `[B, C, H, W]` expressed as two matrix products, so it is differentiable.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rows = Tensor::from_vec(interp_matrix(h, oh), (oh, h), dev)?.to_dtype(x.dtype())?;
    let cols = Tensor::from_vec(interp_matrix(w, ow), (ow, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let y = rows.broadcast_matmul(&x.reshape((b * c, h, w))?)?;
    let y = y.broadcast_matmul(&cols)?;
    Ok(y.reshape((b, c, oh, ow))?)
}

/// Shifts a `[B, C, H, W]` map so that `out[y, x] = input[y + dy, x + dx]`, zero outside.
pub fn shift2d(x: &Tensor, dy: isize, dx: isize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let ady = dy.unsigned_abs();
    let adx = dx.unsigned_abs();
    if ady >= h || adx >= w {
        return Ok(x.zeros_like()?);
    }
    let padded = x
        .pad_with_zeros(2, ady, ady)?
        .pad_with_zeros(3, adx, adx)?;
    let y0 = (ady as isize + dy) as usize;
    let x0 = (adx as isize + dx) as usize;
    Ok(padded.narrow(2, y0, h)?.narrow(3, x0, w)?)
}

/// Sinusoidal encoding of normalized 2D coordinates into `dim` features
/// (`dim/4` geometric frequencies, sin and cos for each axis).
pub fn sinusoidal_encoding(coords: &[(f64, f64)], dim: usize) -> Vec<f64> {
    assert!(dim % 4 == 0, "encoding width must be divisible by 4");
    let nf = dim / 4;
    let mut out = Vec::with_capacity(coords.len() * dim);
    for &(x, y) in coords {
        for axis in [x, y] {
            for i in 0..nf {
                let freq = if nf > 1 {
                    64f64.powf(i as f64 / (nf - 1) as f64)
                } else {
                    1.0
                };
                let arg = std::f64::consts::PI * freq * axis;
                out.push(arg.sin());
                out.push(arg.cos());
            }
        }
    }
    out
}

/// Dense `[1, H*W, dim]` positional encoding at pixel centers.
pub fn grid_encoding(h: usize, w: usize, dim: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let coords: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64)))
        .collect();
    let v = sinusoidal_encoding(&coords, dim);
    Ok(Tensor::from_vec(v, (1, h * w, dim), dev)?.to_dtype(dtype)?)
}

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("custom op expects contiguous input"),
    }
}

macro_rules! binary_cpu {
    ($name:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr) => {{
        let shape = $l1.shape().clone();
        if $l2.shape() != &shape {
            candle_core::bail!("{}: shape mismatch {:?} vs {:?}", $name, shape, $l2.shape());
        }
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let a = contiguous_slice(a, $l1)?;
                let b = contiguous_slice(b, $l2)?;
                let out = a
                    .iter()
                    .zip(b)
                    .map(|(&a, &b)| $f(a as f64, b as f64) as f32)
                    .collect();
                Ok((CpuStorage::F32(out), shape))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let a = contiguous_slice(a, $l1)?;
                let b = contiguous_slice(b, $l2)?;
                let out = a.iter().zip(b).map(|(&a, &b)| $f(a, b)).collect();
                Ok((CpuStorage::F64(out), shape))
            }
            _ => candle_core::bail!("{}: unsupported dtype", $name),
        }
    }};
}

/// `atan2(im, re)` with the result in `(-pi, pi]`: a signed zero imaginary part counts as `+0`.
struct Atan2;

fn atan2_principal(im: f64, re: f64) -> f64 {
    let im = if im == 0.0 { 0.0 } else { im };
    im.atan2(re)
}

impl CustomOp2 for Atan2 {
    fn name(&self) -> &'static str {
        "atan2"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        binary_cpu!("atan2", s1, l1, s2, l2, atan2_principal)
    }

    fn bwd(
        &self,
        im: &Tensor,
        re: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let r2 = (im.sqr()? + re.sqr()?)?.maximum(1e-30)?;
        let d_im = (grad * re)?.div(&r2)?;
        let d_re = (grad * im)?.div(&r2)?.neg()?;
        Ok((Some(d_im), Some(d_re)))
    }
}

/// `sqrt(re² + im²)` with a zero subgradient at the origin.
struct Hypot;

impl CustomOp2 for Hypot {
    fn name(&self) -> &'static str {
        "hypot"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        binary_cpu!("hypot", s1, l1, s2, l2, |a: f64, b: f64| a.hypot(b))
    }

    fn bwd(
        &self,
        re: &Tensor,
        im: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let denom = res.maximum(1e-30)?;
        let scaled = grad.div(&denom)?;
        Ok((Some((&scaled * re)?), Some((&scaled * im)?)))
    }
}

pub fn atan2(im: &Tensor, re: &Tensor) -> Result<Tensor> {
    Ok(im.contiguous()?.apply_op2(&re.contiguous()?, Atan2)?)
}

pub fn hypot(re: &Tensor, im: &Tensor) -> Result<Tensor> {
    Ok(re.contiguous()?.apply_op2(&im.contiguous()?, Hypot)?)
}

/// Flattens `[B, C, H, W]` into tokens `[B, H*W, C]`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return crate::error::shape_err(format!("{n} tokens cannot fold into {h}x{w}"));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn interp_identity_and_rows_sum_to_one() {
        let m = interp_matrix(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m[i * 5 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
        for (inp, out) in [(4, 16), (16, 4), (3, 7)] {
            let m = interp_matrix(inp, out);
            for r in 0..out {
                let s: f64 = m[r * inp..(r + 1) * inp].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_moves_content() {
        let x = t64((0..9).map(|v| v as f64).collect(), &[1, 1, 3, 3]);
        let s = shift2d(&x, 1, 0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(s, vec![3., 4., 5., 6., 7., 8., 0., 0., 0.]);
        let s = shift2d(&x, 0, -1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(s, vec![0., 0., 1., 0., 3., 4., 0., 6., 7.]);
    }

    #[test]
    fn atan2_principal_branch() {
        let im = t64(vec![0.0, -0.0, 1.0, 0.0], &[4]);
        let re = t64(vec![-2.0, -2.0, 0.0, 3.0], &[4]);
        let p = atan2(&im, &re).unwrap().to_vec1::<f64>().unwrap();
        let pi = std::f64::consts::PI;
        assert_eq!(p, vec![pi, pi, pi / 2.0, 0.0]);
    }

    #[test]
    fn hypot_gradient_is_zero_at_origin() {
        let re = Var::from_tensor(&t64(vec![0.0, 3.0], &[2])).unwrap();
        let im = Var::from_tensor(&t64(vec![0.0, 4.0], &[2])).unwrap();
        let m = hypot(re.as_tensor(), im.as_tensor()).unwrap();
        assert_eq!(m.to_vec1::<f64>().unwrap(), vec![0.0, 5.0]);
        let g = m.sum_all().unwrap().backward().unwrap();
        let gr = g.get(&re).unwrap().to_vec1::<f64>().unwrap();
        let gi = g.get(&im).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!((gr[0], gi[0]), (0.0, 0.0));
        assert!((gr[1] - 0.6).abs() < 1e-15 && (gi[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t64(vec![1.0, 2.0, 3.0, -1.0, 0.0, 50.0], &[2, 3]);
        let s = softmax(&x, D::Minus1).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let build = |seed| {
            let mut s = ParamStore::new(DType::F64, seed);
            let mut root = s.root();
            Conv2d::new(&mut root, "c", 3, 4, 3, 1, true).unwrap();
            s.get("c.weight").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }
}
