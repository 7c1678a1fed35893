//! Gradient verification of every loss path on random tiny instances.
//!
//! Each loss term is checked against its direct inputs (similarity logits,
//! visual and expression features, MIL weights), where gradients are well
//! above rounding noise and the per-coordinate relative rule applies. The
//! whole network is checked as well, judged by the normwise error: through
//! a dozen layers single coordinates reach |g| ~ 1e-9, where a central
//! difference on an O(1) loss carries ~1e-11 of rounding noise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::mil::{classification_loss, make_proposals, mil_scores, proposal_features, similarity_maps, ClsWeights, MilConfig};
use crate::model::{Model, SampleInput};
use crate::numeric::{finite_diff_check, GradCheckOptions, GradCheckReport, Tensor, Var};
use crate::objectives::{fuse_positive_predictions, seg_loss, temporal_rank_loss, total_loss, PseudoMask};
use crate::params::BoundParams;
use crate::rng;
use crate::synth::{generate_example, WorldSpec};
use crate::trainer::TrainConfig;

const THETA: f64 = 0.4;
const EPSILON: f64 = 0.1;

/// A random head-level instance: `T` frames of `N_v` visual tokens, `P`
/// positive and `N` negative expression features, MIL weights.
#[derive(Clone, Debug)]
pub struct TinyInstance {
    pub t: usize,
    pub n_v: usize,
    pub p: usize,
    /// `T·N_v × C`.
    pub v: Tensor,
    /// `(P+N) × C`.
    pub fz: Tensor,
    pub w_smt: Tensor,
    pub b_cls: Tensor,
    pub labels: Vec<f64>,
    pub confidences: Vec<f64>,
    pub scale: f64,
}

impl TinyInstance {
    pub fn random(seed: u64) -> Self {
        let mut r = rng::stream(seed, "verify/instance", 0);
        let (t, n_v, c) = (r.random_range(3..=4), r.random_range(4..=6), r.random_range(3..=5));
        let (p, n) = (r.random_range(1..=2), r.random_range(1..=2));
        let e = p + n;
        let mut gauss = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            Tensor::matrix(rows, cols, data).expect("shape")
        };
        let (v, fz, w_smt) = (gauss(t * n_v, c), gauss(e, c), gauss(c, e));
        let b_cls = Tensor::vector((0..e).map(|_| 0.3 * r.sample::<f64, _>(StandardNormal)).collect());
        let labels = (0..e).map(|k| if k < p { 1.0 } else { 0.0 }).collect();
        let confidences = (0..p).map(|_| r.random_range(0.8..1.2)).collect();
        Self { t, n_v, p, v, fz, w_smt, b_cls, labels, confidences, scale: 1.0 / (c as f64).sqrt() }
    }

    fn frame<'t>(&self, v: Var<'t>, t: usize) -> Result<Var<'t>> {
        v.slice_rows(t * self.n_v, (t + 1) * self.n_v)
    }

    /// Classification loss averaged over frames.
    pub fn l_cls<'t>(&self, v: Var<'t>, fz: Var<'t>, w_smt: Var<'t>, b_cls: Var<'t>) -> Result<Var<'t>> {
        let cfg = MilConfig { logit_scale: 1.0, cls_flow: true, smt_flow: true };
        let mut acc: Option<Var<'t>> = None;
        for t in 0..self.t {
            let vt = self.frame(v, t)?;
            let s = similarity_maps(vt, fz, self.scale)?;
            let r = proposal_features(vt, &make_proposals(&s.value(), THETA)?)?;
            let y = mil_scores(r, ClsWeights::Tied(fz), b_cls, w_smt, cfg)?.y;
            let term = classification_loss(y, &self.labels)?;
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        Ok(acc.expect("T >= 1").scale(1.0 / self.t as f64))
    }

    /// Segmentation loss of positive maps `s_pos` (`T·N_v × P`) against
    /// their own detached pseudo-mask, averaged over frames.
    pub fn l_seg<'t>(&self, s_pos: Var<'t>) -> Result<Var<'t>> {
        let mut acc: Option<Var<'t>> = None;
        for t in 0..self.t {
            let st = self.frame(s_pos, t)?;
            let fused = fuse_positive_predictions(st, &self.confidences)?;
            let term = seg_loss(st, &PseudoMask::from_logits(&fused.value(), THETA))?;
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        Ok(acc.expect("T >= 1").scale(1.0 / self.t as f64))
    }

    /// Temporal ranking loss of fused logits (`T × N_v`).
    pub fn l_tmp<'t>(&self, s_final: Var<'t>) -> Result<Var<'t>> {
        let probs: Vec<Var<'t>> = (0..self.t)
            .map(|t| Ok(s_final.slice_rows(t, t + 1)?.reshape(vec![self.n_v])?.sigmoid()))
            .collect::<Result<_>>()?;
        Ok(temporal_rank_loss(&probs, EPSILON, false)?.expect("T >= 3"))
    }

    /// The weighted total from features and MIL weights, wired as in training.
    pub fn composite<'t>(&self, v: Var<'t>, fz: Var<'t>, w_smt: Var<'t>, b_cls: Var<'t>) -> Result<Var<'t>> {
        let l_cls = self.l_cls(v, fz, w_smt, b_cls)?;
        let pos: Vec<usize> = (0..self.p).collect();
        let mut s_pos = Vec::with_capacity(self.t);
        let mut finals = Vec::with_capacity(self.t);
        for t in 0..self.t {
            let sp = similarity_maps(self.frame(v, t)?, fz, self.scale)?.select_cols(&pos)?;
            finals.push(fuse_positive_predictions(sp, &self.confidences)?.reshape(vec![1, self.n_v])?);
            s_pos.push(sp);
        }
        let l_seg = self.l_seg(Var::concat_rows(&s_pos)?)?;
        let l_tmp = self.l_tmp(Var::concat_rows(&finals)?)?;
        Ok(total_loss(l_cls, l_seg, l_tmp, 2.0, 1.0, EPSILON)?.0)
    }

    /// Random positive logits (`T·N_v × P`) spread across the threshold.
    pub fn random_positive_logits(&self, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "verify/seg", 0);
        let (rows, cols) = (self.t * self.n_v, self.p);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| 2.0 * r.sample::<f64, _>(StandardNormal)).collect()).expect("shape")
    }

    /// Fused logits (`T × N_v`) whose last frame nearly repeats the first
    /// while the middle frames are independent, so ranking terms are active.
    pub fn random_fused_logits(&self, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "verify/tmp", 0);
        let mut g = || 2.0 * r.sample::<f64, _>(StandardNormal);
        let first: Vec<f64> = (0..self.n_v).map(|_| g()).collect();
        let mut data = first.clone();
        for _ in 1..self.t - 1 {
            data.extend((0..self.n_v).map(|_| g()));
        }
        data.extend(first.iter().map(|x| x + 0.1 * g()));
        Tensor::matrix(self.t, self.n_v, data).expect("shape")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckRow {
    pub term: String,
    pub instances: usize,
    /// Worst per-coordinate relative error over all instances.
    pub max_rel_error: f64,
    /// Worst `max|a − n| / max|a|` over all instances.
    pub normwise_error: f64,
    /// Which of the two errors decides `passed`.
    pub criterion: &'static str,
    pub passed: bool,
    pub diagnostic: Option<String>,
}

impl GradcheckRow {
    fn new(term: &str, criterion: &'static str, tol: f64, reports: &[GradCheckReport]) -> Self {
        let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        let normwise_error = reports
            .iter()
            .map(|r| if r.grad_inf_norm > 0.0 { r.max_abs_error / r.grad_inf_norm } else { r.max_abs_error })
            .fold(0.0, f64::max);
        let decisive = if criterion == "normwise" { normwise_error } else { max_rel_error };
        let diagnostic = reports.iter().find_map(|r| r.diagnostic.clone());
        Self {
            term: term.to_string(),
            instances: reports.len(),
            max_rel_error,
            normwise_error,
            criterion,
            passed: decisive <= tol && reports.iter().all(|r| r.max_rel_error.is_finite()),
            diagnostic,
        }
    }
}

/// Tiny synthetic world and config for the whole-network check.
pub fn tiny_network(seed: u64) -> (WorldSpec, TrainConfig) {
    let world = WorldSpec {
        grid_h: 4,
        grid_w: 4,
        c: 8,
        n_objects_range: [1, 2],
        extent_range: [1, 2],
        t: 3,
        frame_spacing: 1,
        n_l: 6,
        p: 2,
        n: 2,
        codebook_seed: seed,
        ..WorldSpec::default()
    };
    let cfg = TrainConfig {
        t: 3,
        frame_stride: 1,
        p: 2,
        n: 2,
        k_v: 3,
        k_z: 2,
        depth: 2,
        selection_layers: vec![1, 2],
        interaction_out_gain: 0.5,
        mil_logit_scale: Some(1.0),
        ..TrainConfig::default()
    };
    (world, cfg)
}

fn network_check(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (world, cfg) = tiny_network(seed);
    let (g, set) = generate_example(&world, seed, 0)?;
    let frames: Vec<usize> = (0..g.clip.t).collect();
    let input = SampleInput::new(&g.clip, &frames, &set.positives, &set.negatives)?;
    let model = Model::new(cfg.model_config(world.c))?;
    let store = model.init_params(seed);
    let mut order: Vec<usize> = (0..input.expressions.len()).collect();
    order.shuffle(&mut rng::stream(seed, "verify/order", 0));
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    let params: Vec<Tensor> = names.iter().map(|n| store.get(n).expect("listed").clone()).collect();
    finite_diff_check("network", &params, opts, |tape, vars| {
        let mut p = BoundParams::bind(tape, &store, |_| false);
        p.replace(names.iter().cloned().zip(vars.iter().copied()));
        Ok(model.forward_train(tape, &p, &input, &order, None)?.loss)
    })
}

/// Runs every check on `instances` random instances derived from `seed`.
/// `network_instances` bounds the (slow) whole-network check separately.
pub fn run_suite(seed: u64, instances: usize, network_instances: usize, opts: GradCheckOptions) -> Result<Vec<GradcheckRow>> {
    let mut cls = Vec::new();
    let mut seg = Vec::new();
    let mut tmp = Vec::new();
    let mut composite = Vec::new();
    for i in 0..instances as u64 {
        let s = rng::derive_seed(seed, "verify", i);
        let inst = TinyInstance::random(s);
        let head = [inst.v.clone(), inst.fz.clone(), inst.w_smt.clone(), inst.b_cls.clone()];
        cls.push(finite_diff_check("l_cls", &head, opts, |_, x| inst.l_cls(x[0], x[1], x[2], x[3]))?);
        seg.push(finite_diff_check("l_seg", &[inst.random_positive_logits(s)], opts, |_, x| inst.l_seg(x[0]))?);
        tmp.push(finite_diff_check("l_tmp", &[inst.random_fused_logits(s)], opts, |_, x| inst.l_tmp(x[0]))?);
        composite.push(finite_diff_check("composite", &head, opts, |_, x| inst.composite(x[0], x[1], x[2], x[3]))?);
    }
    let network: Vec<GradCheckReport> = (0..network_instances as u64)
        .map(|i| network_check(rng::derive_seed(seed, "verify/network", i), opts))
        .collect::<Result<_>>()?;
    let tol = opts.tolerance;
    let mut rows = vec![
        GradcheckRow::new("l_cls", "per-coordinate", tol, &cls),
        GradcheckRow::new("l_seg", "per-coordinate", tol, &seg),
        GradcheckRow::new("l_tmp", "per-coordinate", tol, &tmp),
        GradcheckRow::new("composite", "per-coordinate", tol, &composite),
    ];
    if !network.is_empty() {
        rows.push(GradcheckRow::new("network", "normwise", tol, &network));
    }
    Ok(rows)
}
