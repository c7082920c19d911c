//! Depth-guided point prompts: cascade fusion of the refined depth features into a response
//! map, then top-k candidates filtered by a greedy minimum-distance rule.

use candle_core::{DType, Tensor};

use crate::error::{shape_err, Result};
use crate::nn::{resize_bilinear, Conv2d, Init};

/// Size of the candidate pool taken from the response map before distance filtering.
pub const CANDIDATE_POOL: usize = 512;

#[derive(Clone, Debug)]
pub struct ResponseMap {
    /// `[B, 1, H', W']` at the low-level resolution.
    pub values: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointPromptSet {
    /// `(x / W, y / H)` per point.
    pub coords: Vec<(f64, f64)>,
    pub scores: Vec<f64>,
    /// Integer `(x, y)` pixel of each point on the response grid.
    pub pixels: Vec<(usize, usize)>,
}

impl PointPromptSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Every point is a foreground click.
    pub fn labels(&self) -> Vec<bool> {
        vec![true; self.len()]
    }
}

/// Greedy distance-filtered selection over a row-major `height × width` map.
///
/// Candidates are the (at most) 512 highest finite responses, ties broken by row-major order.
/// A candidate is accepted unless it lies strictly closer than `min_distance` pixels
/// (Euclidean) to an already accepted point. When nothing is accepted the map center is used.
pub fn select_points(
    values: &[f64],
    height: usize,
    width: usize,
    max_points: usize,
    min_distance: f64,
) -> PointPromptSet {
    assert_eq!(values.len(), height * width, "response map size mismatch");
    assert!(max_points >= 1, "need at least one prompt");
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_finite()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(CANDIDATE_POOL);

    let min_d2 = min_distance * min_distance;
    let mut pixels: Vec<(usize, usize)> = Vec::with_capacity(max_points);
    let mut scores = Vec::with_capacity(max_points);
    for idx in order {
        if pixels.len() == max_points {
            break;
        }
        let (x, y) = (idx % width, idx / width);
        let clear = pixels.iter().all(|&(px, py)| {
            let dx = px as f64 - x as f64;
            let dy = py as f64 - y as f64;
            dx * dx + dy * dy >= min_d2
        });
        if clear {
            pixels.push((x, y));
            scores.push(values[idx]);
        }
    }
    if pixels.is_empty() {
        let (cx, cy) = (width / 2, height / 2);
        let v = values.get(cy * width + cx).copied().unwrap_or(0.0);
        pixels.push((cx, cy));
        scores.push(if v.is_finite() { v } else { 0.0 });
    }
    let coords = pixels
        .iter()
        .map(|&(x, y)| (x as f64 / width as f64, y as f64 / height as f64))
        .collect();
    PointPromptSet {
        coords,
        scores,
        pixels,
    }
}

/// Runs [`select_points`] on every batch element of a response map.
pub fn select_points_batch(map: &ResponseMap, max_points: usize, min_distance: f64) -> Result<Vec<PointPromptSet>> {
    let (b, c, h, w) = map.values.dims4()?;
    if c != 1 {
        return shape_err(format!("response map must have 1 channel, got {c}"));
    }
    let flat = map.values.to_dtype(DType::F64)?.reshape((b, h * w))?.to_vec2::<f64>()?;
    Ok(flat
        .iter()
        .map(|v| select_points(v, h, w, max_points, min_distance))
        .collect())
}

#[derive(Clone, Debug)]
pub struct PromptGenerator {
    project_high: Conv2d,
    refine: Conv2d,
    head: Conv2d,
}

impl PromptGenerator {
    pub fn new(init: &mut Init, c_low: usize, c_high: usize) -> Result<Self> {
        Ok(Self {
            // bias-free so that a zero high-level feature adds nothing
            project_high: Conv2d::new(init, "project_high", c_high, c_low, 1, 1, false)?,
            refine: Conv2d::new(init, "refine", c_low, c_low, 3, 1, true)?,
            head: Conv2d::new(init, "head", c_low, 1, 3, 1, true)?,
        })
    }

    /// The 3×3 conv block that maps the cascade-fused feature to one channel.
    pub fn conv_block(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.refine.forward(x)?.gelu_erf()?)
    }

    pub fn generate_response_map(&self, refined_low: &Tensor, refined_high: &Tensor) -> Result<ResponseMap> {
        let (b, _, h, w) = refined_low.dims4()?;
        let (bh, _, _, _) = refined_high.dims4()?;
        if b != bh {
            return shape_err(format!("batch mismatch {b} vs {bh}"));
        }
        let up = resize_bilinear(&self.project_high.forward(refined_high)?, h, w)?;
        let values = self.conv_block(&(refined_low + up)?)?;
        Ok(ResponseMap { values })
    }
}
