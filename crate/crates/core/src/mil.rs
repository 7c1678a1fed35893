//! Instance-aware expression classification: similarity maps, thresholded
//! proposals, proposal features, the dual-flow multiple-instance scores and
//! the classification loss.

use crate::error::{Error, Result};
use crate::numeric::{sigmoid, Tensor, Var};

/// Clamp applied to `σ(y)` before the logarithms of the BCE.
pub const BCE_CLAMP: f64 = 1e-12;

/// `s = (v · F'_Zᵀ) · scale`, one column per expression, for a shared
/// visual stream.
pub fn similarity_maps<'t>(v: Var<'t>, fz: Var<'t>, scale: f64) -> Result<Var<'t>> {
    Ok(v.matmul_t(fz)?.scale(scale))
}

/// Similarity maps where column `k` pairs expression `k` with its own
/// visual stream `streams[k]` (all `N_v × C`).
pub fn similarity_maps_per_expression<'t>(streams: &[Var<'t>], fz: Var<'t>, scale: f64) -> Result<Var<'t>> {
    let cols = streams
        .iter()
        .enumerate()
        .map(|(k, v)| fz.slice_rows(k, k + 1)?.matmul_t(*v))
        .collect::<Result<Vec<_>>>()?;
    Ok(Var::concat_rows(&cols)?.transpose()?.scale(scale))
}

/// Binary proposal masks, one per expression.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    /// `masks[k][j]` is true iff `σ(s[j][k]) > θ`.
    pub masks: Vec<Vec<bool>>,
    pub empty: Vec<bool>,
}

impl ProposalSet {
    /// Row-normalized mask matrix (`E × N_v`): each nonempty row sums to 1,
    /// empty rows are zero.
    pub fn averaging_matrix(&self) -> Tensor {
        let e = self.masks.len();
        let n = self.masks.first().map_or(0, Vec::len);
        let mut m = Tensor::zeros(&[e, n]);
        for (k, mask) in self.masks.iter().enumerate() {
            let count = mask.iter().filter(|b| **b).count();
            if count == 0 {
                continue;
            }
            for (j, _) in mask.iter().enumerate().filter(|(_, b)| **b) {
                m.data_mut()[k * n + j] = 1.0 / count as f64;
            }
        }
        m
    }
}

/// Thresholds `σ(s)` at `θ`. Carries no gradient.
pub fn make_proposals(s: &Tensor, theta: f64) -> Result<ProposalSet> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::arg("theta", format!("{theta} is outside (0, 1)")));
    }
    let (n, e) = (s.rows(), s.cols());
    let masks: Vec<Vec<bool>> = (0..e)
        .map(|k| (0..n).map(|j| sigmoid(s.get2(j, k)) > theta).collect())
        .collect();
    let empty = masks.iter().map(|m| !m.iter().any(|b| *b)).collect();
    Ok(ProposalSet { masks, empty })
}

/// Proposal features `R` (`E × C`) from a shared visual stream: the mean of
/// the masked rows, or zero for an empty proposal.
pub fn proposal_features<'t>(v: Var<'t>, proposals: &ProposalSet) -> Result<Var<'t>> {
    v.tape().constant(proposals.averaging_matrix()).matmul(v)
}

/// Proposal features where row `k` averages over `streams[k]`.
pub fn proposal_features_per_expression<'t>(streams: &[Var<'t>], proposals: &ProposalSet) -> Result<Var<'t>> {
    let m = proposals.averaging_matrix();
    let n = m.cols();
    let rows = streams
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let w = Tensor::matrix(1, n, m.row(k).to_vec())?;
            v.tape().constant(w).matmul(*v)
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat_rows(&rows)
}

/// Classification-flow weights.
#[derive(Clone, Copy)]
pub enum ClsWeights<'t> {
    /// Tied to the pooled expression features `F_Z` (`E × C`), i.e.
    /// `W_cls = F_Zᵀ`.
    Tied(Var<'t>),
    /// A free `C × E` matrix.
    Learned(Var<'t>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MilConfig {
    /// Multiplies both flows' logits.
    pub logit_scale: f64,
    pub cls_flow: bool,
    pub smt_flow: bool,
}

pub struct MilScores<'t> {
    pub u_cls: Var<'t>,
    pub u_smt: Var<'t>,
    pub u_fuse: Var<'t>,
    /// Frame-expression scores, one per expression.
    pub y: Var<'t>,
}

/// Dual-flow scores: `U_cls = row_softmax(R·W_cls + b_cls)`,
/// `U_smt = col_softmax(R·W_smt)`, `U_fuse = U_cls ⊙ U_smt` and
/// `y = Σ_n U_fuse[n, ·]`. The semantic flow has no bias: a per-column
/// offset cancels inside a column softmax.
///
/// With one flow disabled the other stands alone; a lone classification
/// flow is averaged over proposals instead of summed so that `y` stays in
/// `[0, 1]`.
pub fn mil_scores<'t>(
    r: Var<'t>,
    w_cls: ClsWeights<'t>,
    b_cls: Var<'t>,
    w_smt: Var<'t>,
    cfg: MilConfig,
) -> Result<MilScores<'t>> {
    let cls_logits = match w_cls {
        ClsWeights::Tied(fz) => r.matmul_t(fz)?,
        ClsWeights::Learned(w) => r.matmul(w)?,
    };
    let u_cls = cls_logits.scale(cfg.logit_scale).add_row(b_cls)?.row_softmax()?;
    let u_smt = r.matmul(w_smt)?.scale(cfg.logit_scale).col_softmax()?;
    let (u_fuse, y) = match (cfg.cls_flow, cfg.smt_flow) {
        (true, true) => {
            let f = u_cls.mul(u_smt)?;
            (f, frame_expression_scores(f)?)
        }
        (true, false) => {
            let e = r.shape()[0] as f64;
            (u_cls, frame_expression_scores(u_cls)?.scale(1.0 / e))
        }
        (false, true) => (u_smt, frame_expression_scores(u_smt)?),
        (false, false) => return Err(Error::arg("mil", "both flows disabled")),
    };
    Ok(MilScores { u_cls, u_smt, u_fuse, y })
}

/// `y^k = Σ_n u_n^k`. Each term is at most the matching column-softmax
/// entry, so `y^k ≤ 1` exactly; rounding can overshoot by an ulp, which is
/// clipped from the value only (the gradient passes through unchanged).
pub fn frame_expression_scores<'t>(u_fuse: Var<'t>) -> Result<Var<'t>> {
    let y = u_fuse.col_sums()?;
    let v = y.value();
    if v.data().iter().all(|x| (0.0..=1.0).contains(x)) {
        return Ok(y);
    }
    Ok(Var::custom(y.tape(), v.map(|x| x.clamp(0.0, 1.0)), &[y], |g| vec![Some(g.clone())]))
}

/// Mean binary cross-entropy of `σ(y)` against `g`, with `σ(y)` clamped to
/// `[1e-12, 1 − 1e-12]`. The gradient is zero wherever the clamp is active.
pub fn classification_loss<'t>(y: Var<'t>, g: &[f64]) -> Result<Var<'t>> {
    let yv = y.value();
    if yv.len() != g.len() || g.is_empty() {
        return Err(Error::dim("classification_loss", yv.shape(), &[g.len()]));
    }
    let e = g.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(g.len());
    for (&yk, &gk) in yv.data().iter().zip(g) {
        let s = sigmoid(yk);
        let p = s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= gk * p.ln() + (1.0 - gk) * (1.0 - p).ln();
        grad.push(if p == s { (s - gk) / e } else { 0.0 });
    }
    let shape = yv.shape().to_vec();
    Ok(Var::custom(y.tape(), Tensor::scalar(total / e), &[y], move |gout| {
        let k = gout.item();
        vec![Some(Tensor::new(shape.clone(), grad.iter().map(|v| v * k).collect()).expect("shape"))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check, GradCheckOptions, Tape};
    use crate::rng;
    use rand::Rng;

    const ALL: MilConfig = MilConfig { logit_scale: 1.0, cls_flow: true, smt_flow: true };

    fn rand_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let tape = Tape::new();
        let c = 4.0f64;
        let e1 = tape.constant(Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let s = similarity_maps(e1, e1, 1.0 / c.sqrt()).unwrap();
        assert_eq!(s.value().data(), &[0.5]);
        let e2 = tape.constant(Tensor::matrix(2, 4, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap());
        let s = similarity_maps(e1, e2, 0.5).unwrap();
        assert_eq!(s.shape(), vec![1, 2]);
        assert!(s.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn proposal_examples() {
        let p = make_proposals(&Tensor::zeros(&[3, 1]), 0.4).unwrap();
        assert_eq!(p.masks[0], vec![true; 3]);
        let p = make_proposals(&Tensor::full(&[3, 1], -10.0), 0.4).unwrap();
        assert!(p.empty[0]);
        let tape = Tape::new();
        let v = tape.constant(Tensor::ones(&[3, 2]));
        let r = proposal_features(v, &p).unwrap();
        assert_eq!(r.value().data(), &[0.0, 0.0]);
        assert!(make_proposals(&Tensor::zeros(&[1, 1]), 1.0).is_err());
    }

    #[test]
    fn symmetric_scores() {
        let tape = Tape::new();
        let r = tape.constant(Tensor::zeros(&[2, 3]));
        let fz = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let m = mil_scores(r, ClsWeights::Tied(fz), b, w, ALL).unwrap();
        assert!(m.u_fuse.value().data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert_eq!(m.y.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn bce_examples() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::zeros(&[4]));
        let l = classification_loss(y, &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-15);
        let y = tape.constant(Tensor::vector(vec![800.0, -800.0]));
        let l = classification_loss(y, &[1.0, 0.0]).unwrap();
        assert!(l.item() < 1e-11);
    }

    #[test]
    fn scores_bounded_and_loss_gradient() {
        let mut r = rng::stream(9, "mil", 0);
        for seed in 0..20 {
            let (e, c) = (2 + seed % 3, 3);
            let params = vec![
                rand_matrix(&mut r, e, c),
                rand_matrix(&mut r, e, c),
                rand_matrix(&mut r, c, e),
                Tensor::vector((0..e).map(|_| r.random_range(-1.0..1.0)).collect()),
            ];
            let g: Vec<f64> = (0..e).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect();
            let rep = finite_diff_check("l_cls", &params, GradCheckOptions::default(), |_, v| {
                let m = mil_scores(v[0], ClsWeights::Tied(v[1]), v[3], v[2], ALL)?;
                for y in m.y.value().data() {
                    assert!((0.0..=1.0).contains(y));
                }
                classification_loss(m.y, &g)
            })
            .unwrap();
            assert!(rep.passed, "{rep:?}");
        }
    }
}
