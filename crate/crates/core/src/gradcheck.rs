//! Finite-difference verification of the differentiable modules on tiny 64-bit instances.

use candle_core::{DType, Tensor};

use crate::decoder::{DecoderDims, MirrorDecoder};
use crate::error::Result;
use crate::fdaf::Fdaf;
use crate::grad::{check_inputs, check_params, random_projection, seeded_normal, seeded_uniform};
use crate::nn::{sigmoid, ParamStore};
use crate::objective::hybrid_loss;
use crate::prompt::{PointPromptSet, PromptGenerator};
use crate::warping::DepthWarpLevel;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;
const DIRECTIONS: usize = 3;

pub const SURFACES: [&str; 5] = ["depth_warping", "response_map", "fdaf", "mirror_decoder", "hybrid_loss"];

#[derive(Clone, Debug)]
pub struct SurfaceResult {
    pub surface: &'static str,
    pub max_rel_err: f64,
}

impl SurfaceResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Regression fixture: cut the FDAF residual gradient.
    pub broken_residual: bool,
}

fn both(inputs: f64, params: f64) -> f64 {
    inputs.max(params)
}

fn depth_warping(seed: u64) -> Result<f64> {
    let mut ps = ParamStore::new(DType::F64, seed);
    let level = DepthWarpLevel::new(&mut ps.root().pp("dw"), 6, 1)?;
    let img = seeded_normal((1, 6, 6, 6), seed + 1, DType::F64)?;
    let depth = seeded_normal((1, 6, 6, 6), seed + 2, DType::F64)?;
    let f = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        let o = level.forward(a, b)?;
        Ok(((random_projection(&o.fused, 7)? + random_projection(&o.refined_depth, 8)?)?
            + random_projection(&o.refined_img, 9)?)?)
    };
    let e_in = check_inputs(&[img.clone(), depth.clone()], |x| f(&x[0], &x[1]), DIRECTIONS, EPS, seed)?;
    let e_p = check_params(&ps.all_vars(), || f(&img, &depth), DIRECTIONS, EPS, seed + 3)?;
    Ok(both(e_in, e_p))
}

fn response_map(seed: u64) -> Result<f64> {
    let mut ps = ParamStore::new(DType::F64, seed);
    let g = PromptGenerator::new(&mut ps.root().pp("ppg"), 6, 10)?;
    let low = seeded_normal((1, 6, 8, 8), seed + 1, DType::F64)?;
    let high = seeded_normal((1, 10, 2, 2), seed + 2, DType::F64)?;
    let f = |a: &Tensor, b: &Tensor| random_projection(&g.generate_response_map(a, b)?.values, 5);
    let e_in = check_inputs(&[low.clone(), high.clone()], |x| f(&x[0], &x[1]), DIRECTIONS, EPS, seed)?;
    let e_p = check_params(&ps.all_vars(), || f(&low, &high), DIRECTIONS, EPS, seed + 3)?;
    Ok(both(e_in, e_p))
}

fn fdaf(seed: u64, broken: bool) -> Result<f64> {
    let mut ps = ParamStore::new(DType::F64, seed);
    let m = Fdaf::new(&mut ps.root().pp("fdaf"), 8, 12, 16, 4)?.with_detached_residual(broken);
    let low = seeded_normal((1, 8, 4, 4), seed + 1, DType::F64)?;
    let high = seeded_normal((1, 12, 2, 2), seed + 2, DType::F64)?;
    let f = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        let (mem, p) = m.forward(a, b)?;
        Ok((random_projection(&mem.values, 1)? + random_projection(&p.map, 2)?)?)
    };
    let e_in = check_inputs(&[low.clone(), high.clone()], |x| f(&x[0], &x[1]), DIRECTIONS, EPS, seed)?;
    let e_p = check_params(&ps.all_vars(), || f(&low, &high), DIRECTIONS, EPS, seed + 3)?;
    Ok(both(e_in, e_p))
}

fn mirror_decoder(seed: u64) -> Result<f64> {
    let mut ps = ParamStore::new(DType::F64, seed);
    let d = MirrorDecoder::new(
        &mut ps.root().pp("decoder"),
        DecoderDims {
            c_low: 8,
            c_high: 12,
            dim: 16,
            heads: 2,
            num_mask_tokens: 3,
            rounds: 2,
            window: 3,
        },
    )?;
    let prompts = [PointPromptSet {
        coords: vec![(0.25, 0.5), (0.75, 0.125), (0.5, 0.875)],
        scores: vec![1.0; 3],
        pixels: vec![(8, 16), (24, 4), (16, 28)],
    }];
    let memory = seeded_normal((1, 4, 16), seed + 1, DType::F64)?;
    let low = seeded_normal((1, 8, 8, 8), seed + 2, DType::F64)?;
    let high = seeded_normal((1, 12, 2, 2), seed + 3, DType::F64)?;
    let freq = sigmoid(&seeded_normal((1, 1, 8, 8), seed + 4, DType::F64)?)?;
    let f = |x: &[Tensor]| -> Result<Tensor> {
        let o = d.forward(&prompts, &x[0], &x[1], &x[2], &x[3], 32, 32)?;
        random_projection(&o.logits, 6)
    };
    let inputs = [memory, low, high, freq];
    let e_in = check_inputs(&inputs, f, DIRECTIONS, EPS, seed)?;
    let e_p = check_params(&ps.all_vars(), || f(&inputs), DIRECTIONS, EPS, seed + 5)?;
    Ok(both(e_in, e_p))
}

fn loss(seed: u64) -> Result<f64> {
    let masks = (0..3)
        .map(|i| Ok(seeded_uniform((1, 1, 8, 8), seed + 10 + i, 0.0, 1.0)?.ge(0.5)?.to_dtype(DType::F64)?))
        .collect::<Result<Vec<_>>>()?;
    let mut inputs = Vec::new();
    for i in 0..3 {
        inputs.push(seeded_normal((1, 1, 8, 8), seed + 20 + i, DType::F64)?);
    }
    for i in 0..3 {
        inputs.push(seeded_normal((1, 1, 4, 4), seed + 30 + i, DType::F64)?);
    }
    check_inputs(
        &inputs,
        |x| Ok(hybrid_loss(&x[..3], &x[3..], &masks)?.objective),
        DIRECTIONS,
        EPS,
        seed,
    )
}

/// Checks every surface; one entry per surface in [`SURFACES`] order.
pub fn run_gradcheck(opts: GradcheckOptions) -> Result<Vec<SurfaceResult>> {
    let s = opts.seed;
    let errs = [
        depth_warping(s)?,
        response_map(s)?,
        fdaf(s, opts.broken_residual)?,
        mirror_decoder(s)?,
        loss(s)?,
    ];
    Ok(SURFACES
        .iter()
        .zip(errs)
        .map(|(&surface, max_rel_err)| SurfaceResult { surface, max_rel_err })
        .collect())
}

pub fn format_report(results: &[SurfaceResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{:<16}{:>12.3e}  {}\n",
            r.surface,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
