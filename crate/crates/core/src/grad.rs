//! Finite-difference gradient verification helpers.

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Standard-normal tensor from a seeded stream (Box-Muller).
pub fn seeded_normal<S: Into<Shape>>(shape: S, seed: u64, dtype: DType) -> Result<Tensor> {
    let shape = shape.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.elem_count();
    let mut v = Vec::with_capacity(n + 1);
    while v.len() < n {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        v.push(r * (std::f64::consts::TAU * u2).cos());
        v.push(r * (std::f64::consts::TAU * u2).sin());
    }
    v.truncate(n);
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn seeded_uniform<S: Into<Shape>>(shape: S, seed: u64, lo: f64, hi: f64) -> Result<Tensor> {
    let shape = shape.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..shape.elem_count()).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.sum_all()?.to_scalar::<f64>()?)
}

/// Reduces a tensor to a scalar with fixed random weights, so that no gradient entry
/// cancels by symmetry.
pub fn random_projection(t: &Tensor, seed: u64) -> Result<Tensor> {
    let w = seeded_normal(t.shape().clone(), seed, t.dtype())?;
    Ok((t * w)?.sum_all()?)
}

/// Central difference of `f` w.r.t. one flat element of `x`.
pub fn central_difference(
    x: &Tensor,
    index: usize,
    eps: f64,
    f: impl Fn(&Tensor) -> Result<f64>,
) -> Result<f64> {
    let mut data = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let orig = data[index];
    data[index] = orig + eps;
    let plus = Tensor::from_vec(data.clone(), x.shape().clone(), x.device())?.to_dtype(x.dtype())?;
    data[index] = orig - eps;
    let minus = Tensor::from_vec(data, x.shape().clone(), x.device())?.to_dtype(x.dtype())?;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * eps))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn unit_directions(shapes: &[Shape], seed: u64) -> Result<Vec<Tensor>> {
    let dirs = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| seeded_normal(s.clone(), seed.wrapping_add(1000 * i as u64), DType::F64))
        .collect::<Result<Vec<_>>>()?;
    let mut norm2 = 0.0;
    for d in &dirs {
        norm2 += d.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    let inv = 1.0 / norm2.sqrt();
    dirs.into_iter().map(|d| Ok((d * inv)?)).collect()
}

fn dot_all(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a.to_dtype(DType::F64)? * b)?.sum_all()?.to_scalar::<f64>()?)
}

/// Compares the directional derivative of the scalar `f(inputs)` along random unit directions
/// with a central difference. Returns the maximum relative error.
pub fn check_inputs(
    inputs: &[Tensor],
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    directions: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let vars = inputs
        .iter()
        .map(|t| Var::from_tensor(t).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&tensors)?.backward()?;
    let shapes: Vec<Shape> = inputs.iter().map(|t| t.shape().clone()).collect();
    let mut worst = 0.0f64;
    for k in 0..directions {
        let dirs = unit_directions(&shapes, seed.wrapping_add(k as u64 * 7919))?;
        let mut analytic = 0.0;
        for (v, d) in vars.iter().zip(&dirs) {
            if let Some(g) = grads.get(v.as_tensor()) {
                analytic += dot_all(g, d)?;
            }
        }
        let at = |sign: f64| -> Result<f64> {
            let moved = inputs
                .iter()
                .zip(&dirs)
                .map(|(x, d)| Ok((x + (d * (sign * eps))?.to_dtype(x.dtype())?)?))
                .collect::<Result<Vec<_>>>()?;
            scalar(&f(&moved)?)
        };
        let numeric = (at(1.0)? - at(-1.0)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

/// Same as [`check_inputs`], perturbing model parameters in place (restored afterwards).
pub fn check_params(
    params: &[Var],
    f: impl Fn() -> Result<Tensor>,
    directions: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    if params.is_empty() {
        return Ok(0.0);
    }
    let grads = f()?.backward()?;
    let originals: Vec<Tensor> = params.iter().map(|p| p.as_tensor().copy()).collect::<std::result::Result<_, _>>()?;
    let shapes: Vec<Shape> = params.iter().map(|p| p.shape().clone()).collect();
    let mut worst = 0.0f64;
    for k in 0..directions {
        let dirs = unit_directions(&shapes, seed.wrapping_add(k as u64 * 104_729))?;
        let mut analytic = 0.0;
        for (p, d) in params.iter().zip(&dirs) {
            if let Some(g) = grads.get(p.as_tensor()) {
                analytic += dot_all(g, d)?;
            }
        }
        let at = |sign: f64| -> Result<f64> {
            for ((p, o), d) in params.iter().zip(&originals).zip(&dirs) {
                p.set(&(o + (d * (sign * eps))?.to_dtype(o.dtype())?)?)?;
            }
            scalar(&f()?)
        };
        let numeric = (at(1.0)? - at(-1.0)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic, numeric));
    }
    for (p, o) in params.iter().zip(&originals) {
        p.set(o)?;
    }
    Ok(worst)
}
