//! Positive-prediction fusion, the pseudo-mask segmentation loss, temporal
//! segment ranking, and the weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{sigmoid, Tensor, Var};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const DICE_SMOOTH: f64 = 1.0;
pub const SOFT_IOU_EPS: f64 = 1e-8;

/// Confidence-weighted average of the positive maps:
/// `s_final = Σ_k s^k c^k / Σ_k c^k`, with the maps as the columns of
/// `s_pos` (`N_v × P`). Returns an `N_v` vector.
pub fn fuse_positive_predictions<'t>(s_pos: Var<'t>, confidences: &[f64]) -> Result<Var<'t>> {
    let shape = s_pos.shape();
    if shape.len() != 2 || shape[1] != confidences.len() || confidences.is_empty() {
        return Err(Error::dim("fuse_positive_predictions", &shape, &[confidences.len()]));
    }
    let total: f64 = confidences.iter().sum();
    if total <= 0.0 || confidences.iter().any(|c| *c <= 0.0) {
        return Err(Error::arg("confidences", "fusion weights must be positive"));
    }
    let w = Tensor::matrix(confidences.len(), 1, confidences.iter().map(|c| c / total).collect())?;
    s_pos.matmul(s_pos.tape().constant(w))?.reshape(vec![shape[0]])
}

/// Fused probabilities and their binarization. Built from plain values, so
/// no gradient can reach the model through it.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoMask {
    pub probs: Vec<f64>,
    pub binary: Vec<bool>,
}

impl PseudoMask {
    pub fn from_logits(s_final: &Tensor, theta: f64) -> Self {
        let probs: Vec<f64> = s_final.data().iter().map(|s| sigmoid(*s)).collect();
        let binary = probs.iter().map(|p| *p > theta).collect();
        Self { probs, binary }
    }

    pub fn target(&self) -> Vec<f64> {
        self.binary.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
    }
}

fn check_vector(op: &'static str, v: &Tensor, n: usize) -> Result<()> {
    if v.shape().len() != 1 || v.len() != n || n == 0 {
        return Err(Error::dim(op, v.shape(), &[n]));
    }
    Ok(())
}

/// `ln σ(z)`, stable for large `|z|`.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Mean focal loss of `σ(logits)` against a binary target.
pub fn focal_loss<'t>(logits: Var<'t>, target: &[f64], alpha: f64, gamma: f64) -> Result<Var<'t>> {
    let s = logits.value();
    check_vector("focal_loss", &s, target.len())?;
    let n = target.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(target.len());
    for (&x, &m) in s.data().iter().zip(target) {
        // With z = ±x the loss is -a (1-σ(z))^γ ln σ(z) for both classes.
        let (z, a, sign) = if m >= 0.5 { (x, alpha, 1.0) } else { (-x, 1.0 - alpha, -1.0) };
        let q = sigmoid(z);
        let lq = log_sigmoid(z);
        let w = (1.0 - q).powf(gamma);
        total += -a * w * lq;
        grad.push(sign * a * w * (gamma * q * lq - (1.0 - q)) / n);
    }
    let shape = s.shape().to_vec();
    Ok(Var::custom(logits.tape(), Tensor::scalar(total / n), &[logits], move |g| {
        let k = g.item();
        vec![Some(Tensor::new(shape.clone(), grad.iter().map(|v| v * k).collect()).expect("shape"))]
    }))
}

/// `1 − (2Σpm + ε_s)/(Σp + Σm + ε_s)` with `p = σ(logits)`.
pub fn dice_loss<'t>(logits: Var<'t>, target: &[f64], smooth: f64) -> Result<Var<'t>> {
    let s = logits.value();
    check_vector("dice_loss", &s, target.len())?;
    let p: Vec<f64> = s.data().iter().map(|x| sigmoid(*x)).collect();
    let a = 2.0 * p.iter().zip(target).map(|(p, m)| p * m).sum::<f64>() + smooth;
    let b = p.iter().sum::<f64>() + target.iter().sum::<f64>() + smooth;
    let grad: Vec<f64> = p
        .iter()
        .zip(target)
        .map(|(p, m)| -(2.0 * m * b - a) / (b * b) * p * (1.0 - p))
        .collect();
    let shape = s.shape().to_vec();
    Ok(Var::custom(logits.tape(), Tensor::scalar(1.0 - a / b), &[logits], move |g| {
        let k = g.item();
        vec![Some(Tensor::new(shape.clone(), grad.iter().map(|v| v * k).collect()).expect("shape"))]
    }))
}

/// `(1/P) Σ_k [Focal(σ(s^k), m) + DICE(σ(s^k), m)]` over the columns of
/// `s_pos`.
pub fn seg_loss<'t>(s_pos: Var<'t>, pseudo: &PseudoMask) -> Result<Var<'t>> {
    let shape = s_pos.shape();
    if shape.len() != 2 || shape[0] != pseudo.binary.len() || shape[1] == 0 {
        return Err(Error::dim("seg_loss", &shape, &[pseudo.binary.len()]));
    }
    let target = pseudo.target();
    let mut total: Option<Var<'t>> = None;
    for k in 0..shape[1] {
        let col = s_pos.column(k)?;
        let term = focal_loss(col, &target, FOCAL_ALPHA, FOCAL_GAMMA)?.add(dice_loss(col, &target, DICE_SMOOTH)?)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one column").scale(1.0 / shape[1] as f64))
}

/// `Σ(a·b) / (Σ(a + b − a·b) + 1e-8)`.
pub fn soft_iou<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let inter = a.mul(b)?;
    let union = a.add(b)?.sub(inter)?.sum().add_scalar(SOFT_IOU_EPS);
    inter.sum().div(union)
}

pub fn soft_iou_values(a: &[f64], b: &[f64]) -> f64 {
    let inter: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let union: f64 = a.iter().zip(b).map(|(x, y)| x + y - x * y).sum();
    inter / (union + SOFT_IOU_EPS)
}

/// All `(t, l, n)` with `t < l < n < len`.
pub fn triples(len: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for t in 0..len {
        for l in t + 1..len {
            for n in l + 1..len {
                out.push((t, l, n));
            }
        }
    }
    out
}

/// Temporal ranking: `Σ ReLU(IoU(p_t, p_n) − IoU(p_t, p_l) − ε)` over all
/// frame triples `t < l < n`, divided by the triple count unless `raw_sum`.
/// Fewer than three frames give zero.
pub fn temporal_rank_loss<'t>(probs: &[Var<'t>], epsilon: f64, raw_sum: bool) -> Result<Option<Var<'t>>> {
    let tr = triples(probs.len());
    if tr.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Var<'t>> = None;
    for &(t, l, n) in &tr {
        let term = soft_iou(probs[t], probs[n])?
            .sub(soft_iou(probs[t], probs[l])?)?
            .add_scalar(-epsilon)
            .relu();
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    let total = total.expect("nonempty");
    Ok(Some(if raw_sum { total } else { total.scale(1.0 / tr.len() as f64) }))
}

/// Consecutive-frame consistency: `Σ_t (1 − IoU(p_t, p_{t+1}))`.
pub fn psc_loss<'t>(probs: &[Var<'t>]) -> Result<Option<Var<'t>>> {
    let mut total: Option<Var<'t>> = None;
    for w in probs.windows(2) {
        let term = soft_iou(w[0], w[1])?.scale(-1.0).add_scalar(1.0);
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Forward pass uses the binary mask, backward the soft probabilities.
pub fn straight_through<'t>(probs: Var<'t>, theta: f64) -> Result<Var<'t>> {
    let p = probs.value();
    let shift = p.map(|x| if x > theta { 1.0 - x } else { -x });
    probs.add(probs.tape().constant(shift))
}

fn hard_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Number of triples whose binary pseudo-masks violate the ranking by more
/// than `ε`. Diagnostic only.
pub fn hard_rank_violations(masks: &[Vec<bool>], epsilon: f64) -> usize {
    triples(masks.len())
        .into_iter()
        .filter(|&(t, l, n)| hard_iou(&masks[t], &masks[n]) - hard_iou(&masks[t], &masks[l]) - epsilon > 0.0)
        .count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_seg: f64,
    pub l_tmp: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
}

/// `total = l_cls + λ₁·l_seg + λ₂·l_tmp`.
pub fn total_loss<'t>(
    l_cls: Var<'t>,
    l_seg: Var<'t>,
    l_tmp: Var<'t>,
    lambda1: f64,
    lambda2: f64,
    epsilon: f64,
) -> Result<(Var<'t>, LossBreakdown)> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::arg("lambda", "loss weights must be non-negative"));
    }
    let total = l_cls.add(l_seg.scale(lambda1))?.add(l_tmp.scale(lambda2))?;
    let b = LossBreakdown {
        l_cls: l_cls.item(),
        l_seg: l_seg.item(),
        l_tmp: l_tmp.item(),
        total: total.item(),
        lambda1,
        lambda2,
        epsilon,
    };
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check, GradCheckOptions, Tape};
    use crate::rng;
    use rand::Rng;

    #[test]
    fn fusion_examples() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let f = fuse_positive_predictions(s, &[1.0, 3.0]).unwrap();
        assert_eq!(f.value().data(), &[0.25, 0.75]);
        let one = tape.constant(Tensor::matrix(2, 1, vec![0.3, -2.0]).unwrap());
        assert_eq!(fuse_positive_predictions(one, &[0.9]).unwrap().value().data(), &[0.3, -2.0]);
        assert!(fuse_positive_predictions(s, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn dice_examples() {
        let tape = Tape::new();
        // σ(±800) is exactly 1/0 in f64.
        let s = tape.constant(Tensor::vector(vec![800.0, -800.0]));
        assert_eq!(dice_loss(s, &[1.0, 0.0], 1.0).unwrap().item(), 0.0);
        let s = tape.constant(Tensor::vector(vec![-800.0, -800.0]));
        assert_eq!(dice_loss(s, &[0.0, 0.0], 1.0).unwrap().item(), 0.0);
    }

    #[test]
    fn soft_iou_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 1.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 1.0, 1.0]));
        assert!((soft_iou(a, a).unwrap().item() - 1.0).abs() < 1e-6);
        assert!((soft_iou(a, b).unwrap().item() - 1.0 / 3.0).abs() < 1e-6);
        let c = tape.constant(Tensor::vector(vec![0.0, 0.0, 1.0]));
        assert!(soft_iou(a, c).unwrap().item().abs() < 1e-6);
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(triples(4), vec![(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]);
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.2, 0.9, 0.5]));
        let l = temporal_rank_loss(&[p, p, p, p], 0.1, false).unwrap().unwrap();
        assert_eq!(l.item(), 0.0);
        assert!(temporal_rank_loss(&[p, p], 0.1, false).unwrap().is_none());
    }

    #[test]
    fn focal_dice_and_tmp_gradients() {
        let mut r = rng::stream(4, "obj", 0);
        for _ in 0..20 {
            let n = 5;
            let s = Tensor::vector((0..n).map(|_| r.random_range(-3.0..3.0)).collect());
            let m: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let opts = GradCheckOptions::default();
            let rep = finite_diff_check("focal", &[s.clone()], opts, |_, v| focal_loss(v[0], &m, 0.25, 2.0)).unwrap();
            assert!(rep.passed, "{rep:?}");
            let rep = finite_diff_check("dice", &[s.clone()], opts, |_, v| dice_loss(v[0], &m, 1.0)).unwrap();
            assert!(rep.passed, "{rep:?}");
        }
    }
}
