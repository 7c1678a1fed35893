//! The full network: encoders with selection, interaction, similarity head,
//! multiple-instance classification and the pseudo-mask objectives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::{
    encode_pair, interact_streams, EncoderStack, InteractionBlock, InteractionConfig, SelectionConfig,
    Stream, StreamsSnapshot, VisualStreams,
};
use crate::error::{Error, Result};
use crate::mil::{
    classification_loss, make_proposals, mil_scores, proposal_features, proposal_features_per_expression,
    similarity_maps, similarity_maps_per_expression, ClsWeights, MilConfig,
};
use crate::numeric::{sigmoid, Tape, Tensor, Var};
use crate::objectives::{
    fuse_positive_predictions, hard_rank_violations, psc_loss, seg_loss, straight_through, temporal_rank_loss,
    total_loss, LossBreakdown, PseudoMask,
};
use crate::params::{BoundParams, ParamStore};
use crate::rng;
use crate::schema::{ClipSample, ExpressionRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// Triple ranking on soft IoU.
    #[default]
    Ranking,
    /// Consecutive-frame consistency.
    Psc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub c: usize,
    pub depth: usize,
    /// Number of training expressions `P + N` (columns of `W_smt`).
    pub n_expr: usize,
    pub theta: f64,
    pub sim_scale: f64,
    pub mil_logit_scale: f64,
    pub selection: SelectionConfig,
    pub interaction: InteractionConfig,
    pub encoder_gain: f64,
    pub interaction_gain: f64,
    /// Init scale of the interaction FFN output layers.
    pub interaction_out_gain: f64,
    pub freeze_encoders: bool,
    pub detach_cls: bool,
    pub cls_learn: bool,
    pub cls_flow: bool,
    pub smt_flow: bool,
    pub ppf_single: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub raw_triple_sum: bool,
    pub temporal_mode: TemporalMode,
    pub tmp_straight_through: bool,
    pub disable_iec: bool,
    pub disable_ppf: bool,
    pub disable_tsr: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let c = 64;
        Self {
            c,
            depth: 12,
            n_expr: 54,
            theta: 0.4,
            sim_scale: 1.0 / (c as f64).sqrt(),
            mil_logit_scale: 1.0 / (c as f64).sqrt(),
            selection: SelectionConfig::default(),
            interaction: InteractionConfig::default(),
            encoder_gain: 0.5,
            interaction_gain: 0.5,
            interaction_out_gain: 0.0,
            freeze_encoders: false,
            detach_cls: false,
            cls_learn: false,
            cls_flow: true,
            smt_flow: true,
            ppf_single: false,
            lambda1: 2.0,
            lambda2: 1.0,
            epsilon: 0.1,
            raw_triple_sum: false,
            temporal_mode: TemporalMode::Ranking,
            tmp_straight_through: false,
            disable_iec: false,
            disable_ppf: false,
            disable_tsr: false,
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub visual: EncoderStack,
    pub linguistic: EncoderStack,
    pub interaction: InteractionBlock,
}

/// One training example in canonical expression order (positives first).
#[derive(Clone, Debug)]
pub struct SampleInput {
    pub clip_id: String,
    /// Sampled frames' tokens, `T·N_v × C`.
    pub visual: Tensor,
    pub n_v: usize,
    pub expressions: Vec<ExpressionRecord>,
    /// 1 for positives, 0 for negatives.
    pub labels: Vec<f64>,
    pub confidences: Vec<f64>,
}

impl SampleInput {
    pub fn new(clip: &ClipSample, frames: &[usize], positives: &[ExpressionRecord], negatives: &[ExpressionRecord]) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * clip.n_patches() * clip.c);
        for &f in frames {
            if f >= clip.t {
                return Err(Error::arg("frames", format!("frame {f} outside clip of {} frames", clip.t)));
            }
            data.extend_from_slice(clip.frame(f));
        }
        let visual = Tensor::matrix(frames.len() * clip.n_patches(), clip.c, data)?;
        let expressions: Vec<ExpressionRecord> = positives.iter().chain(negatives).cloned().collect();
        let labels = (0..expressions.len()).map(|k| if k < positives.len() { 1.0 } else { 0.0 }).collect();
        let confidences = expressions.iter().map(|e| e.confidence).collect();
        Ok(Self { clip_id: clip.clip_id.clone(), visual, n_v: clip.n_patches(), expressions, labels, confidences })
    }

    pub fn n_frames(&self) -> usize {
        self.visual.rows() / self.n_v
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|g| **g == 1.0).count()
    }

    fn linguistic(&self, order: &[usize]) -> Result<(Tensor, Vec<Vec<bool>>)> {
        let first = &self.expressions[0];
        let mut data = Vec::with_capacity(order.len() * first.n_l * first.c);
        let mut masks = Vec::with_capacity(order.len());
        for &k in order {
            let e = &self.expressions[k];
            data.extend_from_slice(&e.tokens);
            masks.push(e.pad_mask.clone());
        }
        Ok((Tensor::matrix(order.len() * first.n_l, first.c, data)?, masks))
    }
}

/// Encoder outputs detached from any tape, in canonical expression order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSnapshot {
    pub visual: StreamsSnapshot,
    /// Pooled expression features `F_Z`, `E × C`.
    pub pooled: Tensor,
}

/// Per-step diagnostics beyond the loss terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepDiagnostics {
    /// Frame-expression scores per frame, in canonical order.
    pub y: Vec<Vec<f64>>,
    pub pseudo_masks: Vec<Vec<bool>>,
    pub hard_violations: usize,
    pub empty_proposals: usize,
}

pub struct ForwardOutput<'t> {
    pub loss: Var<'t>,
    pub breakdown: LossBreakdown,
    pub diagnostics: StepDiagnostics,
    /// The fused maps `s_final` per frame (on the tape).
    pub s_final: Vec<Var<'t>>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.selection.validate()?;
        if cfg.c == 0 || cfg.depth == 0 || cfg.n_expr == 0 {
            return Err(Error::Config("C, depth and P+N must be >= 1".into()));
        }
        if !(cfg.theta > 0.0 && cfg.theta < 1.0) {
            return Err(Error::Config(format!("theta {} outside (0, 1)", cfg.theta)));
        }
        Ok(Self {
            visual: EncoderStack::new(Stream::Visual, cfg.depth, cfg.c),
            linguistic: EncoderStack::new(Stream::Linguistic, cfg.depth, cfg.c),
            interaction: InteractionBlock::new(cfg.c),
            cfg,
        })
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let c = self.cfg.c;
        self.visual.init(&mut store, self.cfg.encoder_gain, &mut rng::stream(seed, "init/enc_v", 0));
        self.linguistic.init(&mut store, self.cfg.encoder_gain, &mut rng::stream(seed, "init/enc_z", 0));
        self.interaction.init(&mut store, self.cfg.interaction_gain, self.cfg.interaction_out_gain, &mut rng::stream(seed, "init/inter", 0));
        let std = 1.0 / (c as f64).sqrt();
        let mut r = rng::stream(seed, "init/proj", 0);
        store.insert_gaussian("proj.v", &[c, c], std, &mut r);
        store.insert_gaussian("proj.z", &[c, c], std, &mut r);
        let mut r = rng::stream(seed, "init/mil", 0);
        store.insert_gaussian("mil.w_smt", &[c, self.cfg.n_expr], std, &mut r);
        store.insert("mil.b_cls", Tensor::zeros(&[self.cfg.n_expr]), false);
        if self.cfg.cls_learn {
            store.insert_gaussian("mil.w_cls", &[c, self.cfg.n_expr], std, &mut r);
        }
        store
    }

    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc_")
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.cfg.freeze_encoders && Self::is_encoder_param(name))
    }

    /// Binds what a training step needs. With a cache the encoder weights
    /// are not needed at all.
    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore, cached: bool) -> BoundParams<'t> {
        if cached {
            BoundParams::bind_subset(tape, store, |n| !Self::is_encoder_param(n))
        } else {
            BoundParams::bind(tape, store, |n| self.is_trainable(n))
        }
    }

    fn encode<'t>(
        &self,
        p: &BoundParams<'t>,
        tape: &'t Tape,
        visual: &Tensor,
        n_v: usize,
        linguistic: Tensor,
        masks: &[Vec<bool>],
    ) -> Result<(VisualStreams<'t>, Var<'t>)> {
        let enc = encode_pair(
            &self.visual,
            &self.linguistic,
            p,
            tape.constant(visual.clone()),
            n_v,
            tape.constant(linguistic),
            masks,
            &self.cfg.selection,
        )?;
        Ok((enc.visual, enc.pooled))
    }

    /// Stream-specific projections from the shared token space into the
    /// space where visual and linguistic features are compared.
    fn project<'t>(&self, p: &BoundParams<'t>, streams: VisualStreams<'t>, fz: Var<'t>) -> Result<(VisualStreams<'t>, Var<'t>)> {
        let (wv, wz) = (p.get("proj.v"), p.get("proj.z"));
        Ok((streams.map_tokenwise(|x| x.matmul(wv))?, fz.matmul(wz)?))
    }

    /// Runs the (frozen) encoders once for caching.
    pub fn encode_snapshot(&self, store: &ParamStore, input: &SampleInput) -> Result<EncodedSnapshot> {
        let tape = Tape::new();
        let p = BoundParams::bind(&tape, store, |_| false);
        let order: Vec<usize> = (0..input.expressions.len()).collect();
        let (lin, masks) = input.linguistic(&order)?;
        let (streams, pooled) = self.encode(&p, &tape, &input.visual, input.n_v, lin, &masks)?;
        Ok(EncodedSnapshot { visual: streams.snapshot(), pooled: (*pooled.value()).clone() })
    }

    /// Training forward pass. `order[k]` is the canonical index of the
    /// expression placed at position `k`; shuffling the order per step keeps
    /// expression positions free of label information.
    pub fn forward_train<'t>(
        &self,
        tape: &'t Tape,
        p: &BoundParams<'t>,
        input: &SampleInput,
        order: &[usize],
        cache: Option<&EncodedSnapshot>,
    ) -> Result<ForwardOutput<'t>> {
        let cfg = &self.cfg;
        let e = order.len();
        if e != input.expressions.len() || e != cfg.n_expr {
            return Err(Error::dim("forward_train", &[e], &[input.expressions.len(), cfg.n_expr]));
        }
        let (streams, fz) = match cache {
            Some(snap) => {
                let s = snap.visual.bind(tape, order);
                (s, tape.constant(snap.pooled.gather_rows(order)))
            }
            None => {
                let (lin, masks) = input.linguistic(order)?;
                self.encode(p, tape, &input.visual, input.n_v, lin, &masks)?
            }
        };
        let (streams, fz) = self.project(p, streams, fz)?;
        let (streams, fz_prime) = interact_streams(&self.interaction, p, &streams, fz, cfg.interaction)?;

        let labels: Vec<f64> = order.iter().map(|&k| input.labels[k]).collect();
        let pos_cols: Vec<usize> = (0..e).filter(|&k| labels[k] == 1.0).collect();
        if pos_cols.is_empty() {
            return Err(Error::arg("expressions", "a training sample needs at least one positive"));
        }
        let fused_cols = if cfg.ppf_single {
            // The most confident positive; ties go to the lowest canonical index.
            let best = pos_cols
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    input.confidences[order[a]]
                        .total_cmp(&input.confidences[order[b]])
                        .then(order[b].cmp(&order[a]))
                })
                .expect("nonempty");
            vec![best]
        } else {
            pos_cols.clone()
        };
        let fused_conf: Vec<f64> = fused_cols.iter().map(|&k| input.confidences[order[k]]).collect();

        let per_expression: Option<Vec<Var<'t>>> = match streams.overrides {
            Some(_) => Some((0..e).map(|k| streams.stream(k)).collect::<Result<_>>()?),
            None => None,
        };
        let cls_weights = if cfg.cls_learn {
            ClsWeights::Learned(p.get("mil.w_cls"))
        } else if cfg.detach_cls {
            ClsWeights::Tied(fz.detach())
        } else {
            ClsWeights::Tied(fz)
        };
        let mil_cfg = MilConfig { logit_scale: cfg.mil_logit_scale, cls_flow: cfg.cls_flow, smt_flow: cfg.smt_flow };

        let n_v = input.n_v;
        let n_frames = input.n_frames();
        let mut cls_terms = Vec::new();
        let mut seg_terms = Vec::new();
        let mut s_final = Vec::with_capacity(n_frames);
        let mut probs = Vec::with_capacity(n_frames);
        let mut diag = StepDiagnostics::default();
        let mut inverse = vec![0; e];
        for (k, &c) in order.iter().enumerate() {
            inverse[c] = k;
        }
        for t in 0..n_frames {
            let (lo, hi) = (t * n_v, (t + 1) * n_v);
            let (s, frame_streams) = match &per_expression {
                Some(all) => {
                    let fs: Vec<Var<'t>> = all.iter().map(|v| v.slice_rows(lo, hi)).collect::<Result<_>>()?;
                    (similarity_maps_per_expression(&fs, fz_prime, cfg.sim_scale)?, Some(fs))
                }
                None => (similarity_maps(streams.base.slice_rows(lo, hi)?, fz_prime, cfg.sim_scale)?, None),
            };
            if !cfg.disable_iec {
                let proposals = make_proposals(&s.value(), cfg.theta)?;
                diag.empty_proposals += proposals.empty.iter().filter(|b| **b).count();
                let r = match &frame_streams {
                    Some(fs) => proposal_features_per_expression(fs, &proposals)?,
                    None => proposal_features(streams.base.slice_rows(lo, hi)?, &proposals)?,
                };
                let scores = mil_scores(r, cls_weights, p.get("mil.b_cls"), p.get("mil.w_smt"), mil_cfg)?;
                let yv = scores.y.value();
                diag.y.push(inverse.iter().map(|&k| yv.data()[k]).collect());
                cls_terms.push(classification_loss(scores.y, &labels)?);
            }
            let s_fused_cols = s.select_cols(&fused_cols)?;
            let fused = fuse_positive_predictions(s_fused_cols, &fused_conf)?;
            let pseudo = PseudoMask::from_logits(&fused.value(), cfg.theta);
            if !cfg.disable_ppf {
                seg_terms.push(seg_loss(s_fused_cols, &pseudo)?);
            }
            let prob = fused.sigmoid();
            probs.push(if cfg.tmp_straight_through { straight_through(prob, cfg.theta)? } else { prob });
            diag.pseudo_masks.push(pseudo.binary);
            s_final.push(fused);
        }
        diag.hard_violations = hard_rank_violations(&diag.pseudo_masks, cfg.epsilon);

        let zero = || tape.constant(Tensor::scalar(0.0));
        let l_cls = mean_of(&cls_terms)?.unwrap_or_else(zero);
        let l_seg = mean_of(&seg_terms)?.unwrap_or_else(zero);
        let l_tmp = if cfg.disable_tsr {
            None
        } else {
            match cfg.temporal_mode {
                TemporalMode::Ranking => temporal_rank_loss(&probs, cfg.epsilon, cfg.raw_triple_sum)?,
                TemporalMode::Psc => psc_loss(&probs)?,
            }
        }
        .unwrap_or_else(zero);
        let (loss, breakdown) = total_loss(l_cls, l_seg, l_tmp, cfg.lambda1, cfg.lambda2, cfg.epsilon)?;
        Ok(ForwardOutput { loss, breakdown, diagnostics: diag, s_final })
    }

    /// Forward + backward for one sample; returns the loss breakdown and
    /// the gradient of every bound trainable parameter.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        input: &SampleInput,
        order: &[usize],
        cache: Option<&EncodedSnapshot>,
    ) -> Result<(LossBreakdown, StepDiagnostics, BTreeMap<String, Tensor>)> {
        let tape = Tape::new();
        let p = self.bind(&tape, store, cache.is_some());
        let out = self.forward_train(&tape, &p, input, order, cache)?;
        if !out.breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "clip {}: l_cls={} l_seg={} l_tmp={}",
                input.clip_id, out.breakdown.l_cls, out.breakdown.l_seg, out.breakdown.l_tmp
            )));
        }
        let grads = tape.backward(out.loss);
        let mut map = BTreeMap::new();
        for (name, var) in p.iter() {
            if var.requires_grad() {
                let g = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()));
                map.insert(name.clone(), g);
            }
        }
        Ok((out.breakdown, out.diagnostics, map))
    }

    /// Similarity logits of one expression against every frame of a clip,
    /// `T × N_v`, from the full network with that expression alone.
    pub fn similarity(&self, store: &ParamStore, clip: &ClipSample, expression: &ExpressionRecord) -> Result<Vec<Vec<f64>>> {
        let frames: Vec<usize> = (0..clip.t).collect();
        let input = SampleInput::new(clip, &frames, std::slice::from_ref(expression), &[])?;
        let tape = Tape::new();
        let p = BoundParams::bind(&tape, store, |_| false);
        let (lin, masks) = input.linguistic(&[0])?;
        let (streams, fz) = self.encode(&p, &tape, &input.visual, input.n_v, lin, &masks)?;
        let (streams, fz) = self.project(&p, streams, fz)?;
        let (streams, fz_prime) = interact_streams(&self.interaction, &p, &streams, fz, self.cfg.interaction)?;
        let v = streams.stream(0)?.value();
        let s = v.matmul_t(&fz_prime.value())?;
        let n_v = input.n_v;
        Ok((0..clip.t)
            .map(|t| (0..n_v).map(|j| s.get2(t * n_v + j, 0) * self.cfg.sim_scale).collect())
            .collect())
    }

    /// Binary patch masks `σ(s) > θ`, one per frame.
    pub fn infer_masks(&self, store: &ParamStore, clip: &ClipSample, expression: &ExpressionRecord) -> Result<Vec<Vec<bool>>> {
        Ok(self
            .similarity(store, clip, expression)?
            .into_iter()
            .map(|frame| frame.into_iter().map(|s| sigmoid(s) > self.cfg.theta).collect())
            .collect())
    }
}

fn mean_of<'t>(terms: &[Var<'t>]) -> Result<Option<Var<'t>>> {
    let Some(first) = terms.first() else { return Ok(None) };
    let mut acc = *first;
    for t in &terms[1..] {
        acc = acc.add(*t)?;
    }
    Ok(Some(acc.scale(1.0 / terms.len() as f64)))
}
