//! Hybrid BCE + soft-IoU objective and the evaluation metrics.

use candle_core::{DType, Tensor};

use crate::error::{shape_err, Error, Result};
use crate::nn::{resize_bilinear, sigmoid};

pub const IOU_SMOOTH: f64 = 1.0;
pub const BETA2: f64 = 0.3;
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameLoss {
    pub bce_final: f64,
    pub iou_final: f64,
    pub bce_inter: f64,
    pub iou_inter: f64,
}

impl FrameLoss {
    pub fn sum(&self) -> f64 {
        self.bce_final + self.iou_final + self.bce_inter + self.iou_inter
    }
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    /// Sum of every component of every frame.
    pub total: f64,
    pub per_frame: Vec<FrameLoss>,
    /// Differentiable total.
    pub objective: Tensor,
}

impl LossBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.per_frame.iter().map(FrameLoss::sum).sum()
    }
}

fn check_binary(g: &Tensor) -> Result<()> {
    let v = g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(bad) = v.iter().find(|&&x| x != 0.0 && x != 1.0) {
        return Err(Error::Invalid(format!("ground-truth mask must be binary, found {bad}")));
    }
    Ok(())
}

/// Pixel-mean binary cross-entropy on logits, `max(x,0) − x·g + ln(1 + e^{−|x|})`.
pub fn bce_with_logits(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let g = g.to_dtype(x.dtype())?;
    let softplus = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((x.relu()? - (x * g)?)? + softplus)?.mean_all()?)
}

/// `1 − (Σ σ(x)g + ε) / (Σ σ(x) + Σ g − Σ σ(x)g + ε)`.
pub fn soft_iou_loss(x: &Tensor, g: &Tensor, eps: f64) -> Result<Tensor> {
    let g = g.to_dtype(x.dtype())?;
    let p = sigmoid(x)?;
    let inter = (&p * &g)?.sum_all()?;
    let union = ((p.sum_all()? + g.sum_all()?)? - &inter)?;
    Ok(((inter + eps)? / (union + eps)?)?.affine(-1.0, 1.0)?)
}

fn value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Loss over the sampled frames. `finals[i]` are the mask logits at the size of `masks[i]`;
/// `inters[i]` are the intermediate logits, upsampled here when smaller.
pub fn hybrid_loss(finals: &[Tensor], inters: &[Tensor], masks: &[Tensor]) -> Result<LossBreakdown> {
    if finals.len() != masks.len() || inters.len() != masks.len() || masks.is_empty() {
        return shape_err(format!(
            "loss needs matching frame counts, got {} / {} / {}",
            finals.len(),
            inters.len(),
            masks.len()
        ));
    }
    let mut per_frame = Vec::with_capacity(masks.len());
    let mut terms = Vec::with_capacity(4 * masks.len());
    for ((m, p), g) in finals.iter().zip(inters).zip(masks) {
        check_binary(g)?;
        let (_, _, h, w) = g.dims4()?;
        if m.dims() != g.dims() {
            return shape_err(format!("logits {:?} vs mask {:?}", m.dims(), g.dims()));
        }
        let p = resize_bilinear(p, h, w)?;
        if p.dims() != g.dims() {
            return shape_err(format!("intermediate logits {:?} vs mask {:?}", p.dims(), g.dims()));
        }
        let parts = [
            bce_with_logits(m, g)?,
            soft_iou_loss(m, g, IOU_SMOOTH)?,
            bce_with_logits(&p, g)?,
            soft_iou_loss(&p, g, IOU_SMOOTH)?,
        ];
        per_frame.push(FrameLoss {
            bce_final: value(&parts[0])?,
            iou_final: value(&parts[1])?,
            bce_inter: value(&parts[2])?,
            iou_inter: value(&parts[3])?,
        });
        terms.extend(parts);
    }
    let objective = Tensor::stack(&terms, 0)?.sum_all()?;
    let total = per_frame.iter().map(FrameLoss::sum).sum();
    Ok(LossBreakdown {
        total,
        per_frame,
        objective,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub iou: f64,
    pub f_beta: f64,
    pub accuracy: f64,
    pub mae: f64,
}

impl MetricReport {
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let mut m = MetricReport::default();
        for r in reports {
            m.iou += r.iou / n;
            m.f_beta += r.f_beta / n;
            m.accuracy += r.accuracy / n;
            m.mae += r.mae / n;
        }
        m
    }
}

/// Metrics of a probability map against a binary mask, thresholded at `threshold`.
pub fn compute_metrics(pred: &[f64], gt: &[f64], threshold: f64) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return shape_err(format!("prediction has {} pixels, mask has {}", pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return shape_err("empty prediction");
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    let mut abs = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Invalid(format!("prediction {p} outside [0, 1]")));
        }
        if g != 0.0 && g != 1.0 {
            return Err(Error::Invalid(format!("ground-truth mask must be binary, found {g}")));
        }
        abs += (p - g).abs();
        match (p >= threshold, g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let n = pred.len() as f64;
    let union = tp + fp + fn_;
    let iou = if union == 0 { 1.0 } else { tp as f64 / union as f64 };
    let f_beta = if union == 0 {
        1.0
    } else {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        if precision + recall == 0.0 {
            0.0
        } else {
            (1.0 + BETA2) * precision * recall / (BETA2 * precision + recall)
        }
    };
    Ok(MetricReport {
        iou,
        f_beta,
        accuracy: (tp + tn) as f64 / n,
        mae: abs / n,
    })
}

/// [`compute_metrics`] on tensors of identical shape.
pub fn compute_metrics_tensor(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<MetricReport> {
    if pred.dims() != gt.dims() {
        return shape_err(format!("prediction {:?} vs mask {:?}", pred.dims(), gt.dims()));
    }
    let p = pred.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let g = gt.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    compute_metrics(&p, &g, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{seeded_normal, seeded_uniform};
    use candle_core::Device;
    use proptest::prelude::*;

    fn t(v: Vec<f64>, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    fn mask(seed: u64, h: usize, w: usize) -> Tensor {
        seeded_uniform((1, 1, h, w), seed, 0.0, 1.0).unwrap().ge(0.5).unwrap().to_dtype(DType::F64).unwrap()
    }

    #[test]
    fn saturated_prediction_has_zero_loss() {
        let g = mask(1, 8, 8);
        let logits = g.affine(200.0, -100.0).unwrap();
        let coarse = resize_bilinear(&logits, 8, 8).unwrap();
        let l = hybrid_loss(&[logits.clone(), logits.clone(), logits], &[coarse.clone(), coarse.clone(), coarse], &[g.clone(), g.clone(), g]).unwrap();
        assert!(l.total.abs() < 1e-12, "{}", l.total);
    }

    #[test]
    fn half_probability_bce_is_ln2() {
        let g = mask(2, 6, 6);
        let zero = g.zeros_like().unwrap();
        let b = bce_with_logits(&zero, &g).unwrap().to_scalar::<f64>().unwrap();
        assert!((b - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let g = t(vec![0.0, 0.5, 1.0, 1.0], 2, 2);
        let x = g.zeros_like().unwrap();
        assert!(matches!(
            hybrid_loss(&[x.clone()], &[x], &[g]),
            Err(Error::Invalid(_))
        ));
    }

    fn loop_frame(x: &[f64], g: &[f64]) -> (f64, f64) {
        let mut bce = 0.0;
        let (mut i, mut s, mut gs) = (0.0, 0.0, 0.0);
        for (&x, &g) in x.iter().zip(g) {
            let p = 1.0 / (1.0 + (-x).exp());
            bce += -(g * p.ln() + (1.0 - g) * (1.0 - p).ln());
            i += p * g;
            s += p;
            gs += g;
        }
        (bce / x.len() as f64, 1.0 - (i + 1.0) / (s + gs - i + 1.0))
    }

    #[test]
    fn loss_matches_pixel_loop() {
        let mut finals = Vec::new();
        let mut inters = Vec::new();
        let mut masks = Vec::new();
        let mut expect = 0.0;
        for f in 0..3u64 {
            let m = seeded_normal((1, 1, 8, 8), 10 + f, DType::F64).unwrap();
            let p = seeded_normal((1, 1, 8, 8), 20 + f, DType::F64).unwrap();
            let g = mask(30 + f, 8, 8);
            let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let (a, b) = loop_frame(&flat(&m), &flat(&g));
            let (c, d) = loop_frame(&flat(&p), &flat(&g));
            expect += a + b + c + d;
            finals.push(m);
            inters.push(p);
            masks.push(g);
        }
        let l = hybrid_loss(&finals, &inters, &masks).unwrap();
        assert!((l.total - expect).abs() <= 1e-6);
        assert_eq!(l.total, l.component_sum());
        assert!((l.objective.to_scalar::<f64>().unwrap() - l.total).abs() < 1e-12);
        for fl in &l.per_frame {
            assert!(fl.bce_final >= 0.0 && fl.bce_inter >= 0.0);
            assert!((0.0..=1.0).contains(&fl.iou_final) && (0.0..=1.0).contains(&fl.iou_inter));
        }
    }

    #[test]
    fn coarse_intermediate_is_upsampled() {
        let g = mask(3, 16, 16);
        let m = seeded_normal((1, 1, 16, 16), 4, DType::F64).unwrap();
        let p = seeded_normal((1, 1, 4, 4), 5, DType::F64).unwrap();
        let l = hybrid_loss(&[m], &[p.clone()], &[g.clone()]).unwrap();
        let up = resize_bilinear(&p, 16, 16).unwrap();
        let direct = bce_with_logits(&up, &g).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l.per_frame[0].bce_inter, direct);
    }

    #[test]
    fn metric_examples() {
        let gt = vec![1.0, 1.0, 0.0, 0.0];
        let m = compute_metrics(&gt, &gt, THRESHOLD).unwrap();
        assert_eq!(m, MetricReport { iou: 1.0, f_beta: 1.0, accuracy: 1.0, mae: 0.0 });
        let m = compute_metrics(&[0.0; 4], &[1.0; 4], THRESHOLD).unwrap();
        assert_eq!((m.iou, m.accuracy, m.mae), (0.0, 0.0, 1.0));
        let m = compute_metrics(&[1.0, 0.0, 0.0, 0.0], &gt, THRESHOLD).unwrap();
        assert!((m.iou - 0.5).abs() < 1e-12);
        let m = compute_metrics(&[0.0; 4], &[0.0; 4], THRESHOLD).unwrap();
        assert_eq!(m.iou, 1.0);
        assert!(compute_metrics(&[0.0; 3], &[0.0; 4], THRESHOLD).is_err());
    }

    #[test]
    fn half_coverage_iou_is_one_third() {
        // 8×8, gt = left half, pred = top half: overlap is a quarter of the pixels
        let mut pred = vec![0.0; 64];
        let mut gt = vec![0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                gt[y * 8 + x] = if x < 4 { 1.0 } else { 0.0 };
                pred[y * 8 + x] = if y < 4 { 1.0 } else { 0.0 };
            }
        }
        let m = compute_metrics(&pred, &gt, THRESHOLD).unwrap();
        assert!((m.iou - 1.0 / 3.0).abs() <= 1e-6);
    }

    fn oracle(pred: &[f64], gt: &[f64]) -> MetricReport {
        let bin: Vec<bool> = pred.iter().map(|&p| p >= 0.5).collect();
        let count = |f: &dyn Fn(bool, bool) -> bool| bin.iter().zip(gt).filter(|(&b, &g)| f(b, g == 1.0)).count() as f64;
        let tp = count(&|b, g| b && g);
        let fp = count(&|b, g| b && !g);
        let fn_ = count(&|b, g| !b && g);
        let tn = count(&|b, g| !b && !g);
        let iou = if tp + fp + fn_ == 0.0 { 1.0 } else { tp / (tp + fp + fn_) };
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f = if tp + fp + fn_ == 0.0 {
            1.0
        } else if prec + rec == 0.0 {
            0.0
        } else {
            1.3 * prec * rec / (0.3 * prec + rec)
        };
        let mae = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64;
        MetricReport { iou, f_beta: f, accuracy: (tp + tn) / pred.len() as f64, mae }
    }

    #[test]
    fn metrics_match_confusion_oracle() {
        for seed in 0..100u64 {
            let n = 1 + (seed as usize * 7) % 60;
            let pred = seeded_uniform(n, seed, 0.0, 1.0).unwrap().to_vec1::<f64>().unwrap();
            let gt: Vec<f64> = seeded_uniform(n, seed + 1000, 0.0, 1.0)
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()
                .iter()
                .map(|&u| if u < 0.4 { 1.0 } else { 0.0 })
                .collect();
            let a = compute_metrics(&pred, &gt, THRESHOLD).unwrap();
            let b = oracle(&pred, &gt);
            for (x, y) in [(a.iou, b.iou), (a.f_beta, b.f_beta), (a.accuracy, b.accuracy), (a.mae, b.mae)] {
                assert!((x - y).abs() <= 1e-6);
                assert!((0.0..=1.0).contains(&x));
            }
        }
    }

    proptest! {
        #[test]
        fn loss_is_permutation_invariant(seed in any::<u64>(), shift in 1usize..63) {
            let m = seeded_normal((1, 1, 8, 8), seed, DType::F64).unwrap();
            let g = mask(seed ^ 0x55, 8, 8);
            let roll = |t: &Tensor| {
                let mut v = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
                v.rotate_left(shift);
                Tensor::from_vec(v, (1, 1, 8, 8), &Device::Cpu).unwrap()
            };
            let a = hybrid_loss(&[m.clone()], &[m.clone()], &[g.clone()]).unwrap();
            let b = hybrid_loss(&[roll(&m)], &[roll(&m)], &[roll(&g)]).unwrap();
            prop_assert!((a.total - b.total).abs() < 1e-12);
            let pa = crate::nn::sigmoid(&m).unwrap();
            let ma = compute_metrics_tensor(&pa, &g, THRESHOLD).unwrap();
            let mb = compute_metrics_tensor(&roll(&pa), &roll(&g), THRESHOLD).unwrap();
            prop_assert!((ma.mae - mb.mae).abs() < 1e-12 && ma.iou == mb.iou);
        }
    }
}
