//! Training loop: frame sampling, batched gradients, AdamW, per-epoch
//! validation, metrics rows and resumable checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{InteractionConfig, SelectionConfig, SelectionMerge};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, DEFAULT_BOUNDARY_TOL};
use crate::model::{EncodedSnapshot, Model, ModelConfig, SampleInput, TemporalMode};
use crate::numeric::Tensor;
use crate::params::ParamStore;
use crate::parallel::map_ordered;
use crate::rng;
use crate::schema::{AugmentedExpressionSet, ClipSample, ExpressionRecord, Polarity};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "epoch,l_cls,l_seg,l_tmp,total,val_miou,val_jf";

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Every training knob. Read from a flat TOML file whose keys are exactly
/// these field names; omitted keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Frames sampled per clip per step.
    #[serde(rename = "T")]
    pub t: usize,
    /// Spacing between sampled frames, in source-video frames.
    pub frame_stride: usize,
    #[serde(alias = "θ")]
    pub theta: f64,
    #[serde(alias = "λ₁")]
    pub lambda1: f64,
    #[serde(alias = "λ₂")]
    pub lambda2: f64,
    #[serde(alias = "ε")]
    pub epsilon: f64,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K_V")]
    pub k_v: usize,
    #[serde(rename = "K_Z")]
    pub k_z: usize,
    pub selection_layers: Vec<usize>,
    pub seed: u64,
    /// Clips per optimizer step.
    pub batch_size: usize,
    /// Encoder layers per stream.
    pub depth: usize,
    pub encoder_gain: f64,
    pub interaction_gain: f64,
    pub interaction_out_gain: f64,
    /// Similarity logit scale; `None` means `1/√C`.
    pub sim_scale: Option<f64>,
    /// Scale inside both MIL softmaxes; `None` means `1/√C`.
    pub mil_logit_scale: Option<f64>,
    /// Keep the encoder weights at their initial values (their outputs are
    /// then computed once per clip and cached).
    pub freeze_encoders: bool,
    /// With `freeze_encoders`, epochs during which the encoders still train
    /// before they are frozen.
    pub warm_start_epochs: usize,
    pub detach_cls: bool,
    pub selection_merge: SelectionMerge,
    pub raw_triple_sum: bool,
    pub psc_mode: bool,
    pub tmp_straight_through: bool,
    /// Randomly permute expression columns at every step.
    pub shuffle_expressions: bool,
    pub cosine_decay: bool,
    pub cls_learn: bool,
    pub ppf_single: bool,
    pub disable_crea: bool,
    pub disable_crea_pos: bool,
    pub disable_crea_neg: bool,
    pub disable_selection: bool,
    pub disable_select_visual: bool,
    pub disable_select_linguistic: bool,
    pub disable_interaction: bool,
    pub disable_attn_visual_query: bool,
    pub disable_attn_linguistic_query: bool,
    pub disable_iec: bool,
    pub disable_ppf: bool,
    pub disable_tsr: bool,
    pub disable_cls_flow: bool,
    pub disable_smt_flow: bool,
    /// Validate on at most this many clips per epoch.
    pub max_val_clips: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            epochs: 50,
            t: 4,
            frame_stride: 10,
            theta: 0.4,
            lambda1: 2.0,
            lambda2: 1.0,
            epsilon: 0.1,
            p: 6,
            n: 48,
            k_v: 10,
            k_z: 10,
            selection_layers: vec![3, 6, 9, 12],
            seed: 0,
            batch_size: 4,
            depth: 12,
            encoder_gain: 0.5,
            interaction_gain: 0.5,
            interaction_out_gain: 0.0,
            sim_scale: None,
            mil_logit_scale: None,
            freeze_encoders: false,
            warm_start_epochs: 0,
            detach_cls: false,
            selection_merge: SelectionMerge::PerExpression,
            raw_triple_sum: false,
            psc_mode: false,
            tmp_straight_through: false,
            shuffle_expressions: true,
            cosine_decay: false,
            cls_learn: false,
            ppf_single: false,
            disable_crea: false,
            disable_crea_pos: false,
            disable_crea_neg: false,
            disable_selection: false,
            disable_select_visual: false,
            disable_select_linguistic: false,
            disable_interaction: false,
            disable_attn_visual_query: false,
            disable_attn_linguistic_query: false,
            disable_iec: false,
            disable_ppf: false,
            disable_tsr: false,
            disable_cls_flow: false,
            disable_smt_flow: false,
            max_val_clips: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("epochs", self.epochs),
            ("T", self.t),
            ("frame_stride", self.frame_stride),
            ("P", self.p),
            ("N", self.n),
            ("K_V", self.k_v),
            ("K_Z", self.k_z),
            ("batch_size", self.batch_size),
            ("depth", self.depth),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("epsilon", self.epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must lie in (0, 1), got {}", self.theta));
        }
        if self.disable_cls_flow && self.disable_smt_flow {
            return bad("disable_cls_flow and disable_smt_flow cannot both be set".into());
        }
        if self.disable_ppf && self.ppf_single {
            return bad("ppf_single has no effect with disable_ppf".into());
        }
        if self.warm_start_epochs > 0 && !self.freeze_encoders {
            return bad("warm_start_epochs needs freeze_encoders".into());
        }
        self.selection().validate()
    }

    fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            k_v: self.k_v,
            k_z: self.k_z,
            layers: self.selection_layers.clone(),
            merge: self.selection_merge,
            enabled: !self.disable_selection,
            select_visual: !self.disable_select_visual,
            select_linguistic: !self.disable_select_linguistic,
        }
    }

    /// Model configuration for token width `c`.
    pub fn model_config(&self, c: usize) -> ModelConfig {
        let inv_sqrt_c = 1.0 / (c as f64).sqrt();
        ModelConfig {
            c,
            depth: self.depth,
            n_expr: self.p + self.n,
            theta: self.theta,
            sim_scale: self.sim_scale.unwrap_or(inv_sqrt_c),
            mil_logit_scale: self.mil_logit_scale.unwrap_or(inv_sqrt_c),
            selection: self.selection(),
            interaction: InteractionConfig {
                enabled: !self.disable_interaction,
                visual_query: !self.disable_attn_visual_query,
                linguistic_query: !self.disable_attn_linguistic_query,
            },
            encoder_gain: self.encoder_gain,
            interaction_gain: self.interaction_gain,
            interaction_out_gain: self.interaction_out_gain,
            freeze_encoders: self.freeze_encoders,
            detach_cls: self.detach_cls,
            cls_learn: self.cls_learn,
            cls_flow: !self.disable_cls_flow,
            smt_flow: !self.disable_smt_flow,
            ppf_single: self.ppf_single,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            epsilon: self.epsilon,
            raw_triple_sum: self.raw_triple_sum,
            temporal_mode: if self.psc_mode { TemporalMode::Psc } else { TemporalMode::Ranking },
            tmp_straight_through: self.tmp_straight_through,
            disable_iec: self.disable_iec,
            disable_ppf: self.disable_ppf,
            disable_tsr: self.disable_tsr,
        }
    }

    /// Digest of everything that shapes a run except its length, so a
    /// checkpoint can be resumed with a larger `epochs`.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        let text = serde_json::to_string(&c).expect("config serializes");
        format!("{:016x}", rng::fnv1a64(text.as_bytes()))
    }
}

/// Frames `start, start+stride, …` clamped to the last frame, `t` of them.
pub fn frames_from(start: usize, len: usize, t: usize, stride: usize) -> Vec<usize> {
    (0..t).map(|i| (start + i * stride).min(len - 1)).collect()
}

/// Random start such that the whole window fits when the clip is long
/// enough (otherwise start 0 and the tail is clamped). `len >= 1`.
pub fn sample_frames(len: usize, t: usize, stride: usize, r: &mut impl Rng) -> Vec<usize> {
    assert!(len >= 1, "sample_frames needs a nonempty clip");
    let max_start = (len - 1).saturating_sub((t.saturating_sub(1)) * stride);
    frames_from(r.random_range(0..=max_start), len, t, stride)
}

/// `frame_stride` in units of the clip's stored frames (at least 1).
pub fn stored_stride(clip: &ClipSample, frame_stride: usize) -> usize {
    let spacing = match clip.frame_indices.as_slice() {
        [a, b, ..] if b > a => b - a,
        _ => 1,
    };
    ((frame_stride as f64 / spacing as f64).round() as usize).max(1)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One AdamW update of every parameter that has a gradient. Weight decay is
/// decoupled and skipped for parameters stored with `decay = false`.
pub fn adamw_step(store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState, lr: f64, wd: f64) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let param = store
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
        if param.value.shape() != g.shape() {
            return Err(Error::dim("adamw_step", param.value.shape(), g.shape()));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let decay = if param.decay { wd } else { 0.0 };
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (p, &gi)) in param.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * decay * *p;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// A clip with the exact expression sets used for training.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub clip: ClipSample,
    pub positives: Vec<ExpressionRecord>,
    pub negatives: Vec<ExpressionRecord>,
}

/// Applies the augmentation toggles: without augmented positives every
/// positive is the original expression (confidence 1); without augmented
/// negatives they are the original expressions of other clips.
pub fn prepare_examples(data: &[(ClipSample, AugmentedExpressionSet)], cfg: &TrainConfig) -> Result<Vec<TrainExample>> {
    let no_pos = cfg.disable_crea || cfg.disable_crea_pos;
    let no_neg = cfg.disable_crea || cfg.disable_crea_neg;
    data.iter()
        .enumerate()
        .map(|(i, (clip, set))| {
            let positives = if no_pos {
                vec![set.original.clone().with_polarity(Polarity::Positive, 1.0); cfg.p]
            } else {
                take_exact(&set.positives, cfg.p, &clip.clip_id, "positives")?
            };
            let negatives = if no_neg {
                let mut others: Vec<&ExpressionRecord> = data
                    .iter()
                    .map(|(_, s)| &s.original)
                    .filter(|o| o.text != set.original.text)
                    .collect();
                if others.is_empty() {
                    return Err(Error::Config("negatives from other clips need at least two distinct originals".into()));
                }
                let mut r = rng::stream(cfg.seed, "crea-off-negatives", i as u64);
                others.shuffle(&mut r);
                (0..cfg.n)
                    .map(|k| others[k % others.len()].clone().with_polarity(Polarity::Negative, 1.0))
                    .collect()
            } else {
                take_exact(&set.negatives, cfg.n, &clip.clip_id, "negatives")?
            };
            Ok(TrainExample { clip: clip.clone(), positives, negatives })
        })
        .collect()
}

fn take_exact(items: &[ExpressionRecord], k: usize, clip: &str, what: &str) -> Result<Vec<ExpressionRecord>> {
    if items.len() < k {
        return Err(Error::Validation {
            field: format!("{clip}.{what}"),
            rule: format!("has {} entries, config needs {k}", items.len()),
        });
    }
    Ok(items[..k].to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_seg: f64,
    pub l_tmp: f64,
    pub total: f64,
    pub val_miou: f64,
    pub val_jf: f64,
}

pub fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.epoch, r.l_cls, r.l_seg, r.l_tmp, r.total, r.val_miou, r.val_jf);
    }
    s
}

/// Where the per-epoch random streams resume: they derive from the seed and
/// the epoch index alone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub config_fingerprint: String,
    /// Token width the parameters were built for.
    #[serde(rename = "C")]
    pub c: usize,
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng: RngState,
    pub history: Vec<EpochRow>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                path.display(),
                version.map_or("missing".to_string(), |v| v.to_string())
            )));
        }
        Ok(serde_json::from_value(raw)?)
    }

    /// The model these parameters belong to.
    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.model_config(self.c))
    }
}

/// Runtime knobs that do not change results.
pub struct TrainOptions<'a> {
    pub workers: usize,
    /// Stop after this epoch even if the config asks for more.
    pub stop_after: Option<usize>,
    /// Rewritten after every epoch.
    pub checkpoint_path: Option<&'a Path>,
    pub on_epoch: Option<&'a (dyn Fn(&EpochRow) + Sync)>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self { workers: 1, stop_after: None, checkpoint_path: None, on_epoch: None }
    }
}

fn lr_at(cfg: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    if !cfg.cosine_decay || total_steps == 0 {
        return cfg.lr;
    }
    let progress = (step as f64 / total_steps as f64).min(1.0);
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct StepItem {
    example: usize,
    frames: Vec<usize>,
    order: Vec<usize>,
}

/// Fresh parameters and optimizer state for a run.
pub fn initial_checkpoint(cfg: &TrainConfig, c: usize) -> Result<Checkpoint> {
    cfg.validate()?;
    let model = Model::new(cfg.model_config(c))?;
    Ok(Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        epoch: 0,
        config: cfg.clone(),
        config_fingerprint: cfg.fingerprint(),
        c,
        params: model.init_params(cfg.seed),
        adam: AdamState::default(),
        rng: RngState { seed: cfg.seed, next_epoch: 1 },
        history: Vec::new(),
    })
}

/// Trains from `start` (a fresh [`initial_checkpoint`] or a saved one) up to
/// `cfg.epochs`, validating on `val` after every epoch.
pub fn train(
    cfg: &TrainConfig,
    train_data: &[(ClipSample, AugmentedExpressionSet)],
    val_data: &[(ClipSample, AugmentedExpressionSet)],
    start: Option<Checkpoint>,
    opts: &TrainOptions<'_>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let (first, _) = train_data.first().ok_or_else(|| Error::Config("training split is empty".into()))?;
    if val_data.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let c = first.c;
    let mut ck = match start {
        Some(mut ck) => {
            if ck.config_fingerprint != cfg.fingerprint() || ck.c != c {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config {} (C={}) does not match run config {} (C={c})",
                    ck.config_fingerprint,
                    ck.c,
                    cfg.fingerprint()
                )));
            }
            ck.config = cfg.clone();
            ck
        }
        None => initial_checkpoint(cfg, c)?,
    };
    let model = Model::new(cfg.model_config(c))?;
    let warm_model = Model::new(ModelConfig { freeze_encoders: false, ..cfg.model_config(c) })?;
    let examples = prepare_examples(train_data, cfg)?;
    let val = &val_data[..cfg.max_val_clips.unwrap_or(val_data.len()).min(val_data.len())];
    let e = cfg.p + cfg.n;
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let last = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut cache: HashMap<usize, (Vec<usize>, EncodedSnapshot)> = HashMap::new();

    for epoch in ck.epoch + 1..=last {
        let frozen = cfg.freeze_encoders && epoch > cfg.warm_start_epochs;
        let active = if frozen { &model } else { &warm_model };
        let mut r = rng::stream(cfg.seed, "epoch", epoch as u64);
        let mut perm: Vec<usize> = (0..examples.len()).collect();
        perm.shuffle(&mut r);
        let mut sums = [0.0; 4];
        for (step, batch) in perm.chunks(cfg.batch_size).enumerate() {
            let items: Vec<StepItem> = batch
                .iter()
                .map(|&i| {
                    let clip = &examples[i].clip;
                    let frames = sample_frames(clip.t, cfg.t, stored_stride(clip, cfg.frame_stride), &mut r);
                    let mut order: Vec<usize> = (0..e).collect();
                    if cfg.shuffle_expressions {
                        order.shuffle(&mut r);
                    }
                    StepItem { example: i, frames, order }
                })
                .collect();
            let inputs: Vec<SampleInput> = items
                .iter()
                .map(|it| {
                    let ex = &examples[it.example];
                    SampleInput::new(&ex.clip, &it.frames, &ex.positives, &ex.negatives)
                })
                .collect::<Result<_>>()?;
            if frozen {
                let missing: Vec<usize> = (0..items.len())
                    .filter(|&k| cache.get(&items[k].example).is_none_or(|(f, _)| *f != items[k].frames))
                    .collect();
                let snaps = map_ordered(&missing, opts.workers, |_, &k| model.encode_snapshot(&ck.params, &inputs[k]));
                for (k, snap) in missing.into_iter().zip(snaps) {
                    cache.insert(items[k].example, (items[k].frames.clone(), snap?));
                }
            }
            let results = map_ordered(&items, opts.workers, |k, it| {
                let snap = frozen.then(|| &cache[&it.example].1);
                active.loss_and_grads(&ck.params, &inputs[k], &it.order, snap)
            });
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for res in results {
                let (b, _, g) = res.map_err(|err| match err {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch} step {}: {m}", step + 1)),
                    other => other,
                })?;
                for (s, v) in sums.iter_mut().zip([b.l_cls, b.l_seg, b.l_tmp, b.total]) {
                    *s += v;
                }
                for (name, gt) in g {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(gt.data()).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(name, gt);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            let lr = lr_at(cfg, ck.adam.step, total_steps);
            adamw_step(&mut ck.params, &grads, &mut ck.adam, lr, cfg.weight_decay)?;
        }
        let report = evaluate_model(&model, &ck.params, val, DEFAULT_BOUNDARY_TOL, opts.workers)?;
        let n = examples.len() as f64;
        let row = EpochRow {
            epoch,
            l_cls: sums[0] / n,
            l_seg: sums[1] / n,
            l_tmp: sums[2] / n,
            total: sums[3] / n,
            val_miou: report.mean_iou,
            val_jf: report.j_and_f,
        };
        log::info!(
            "epoch {epoch}: total {:.5} (cls {:.5} seg {:.5} tmp {:.5}) val mIoU {:.4} J&F {:.4}",
            row.total,
            row.l_cls,
            row.l_seg,
            row.l_tmp,
            row.val_miou,
            row.val_jf
        );
        if let Some(cb) = opts.on_epoch {
            cb(&row);
        }
        ck.history.push(row);
        ck.epoch = epoch;
        ck.rng.next_epoch = epoch + 1;
        if let Some(path) = opts.checkpoint_path {
            ck.save(path)?;
        }
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_sampling() {
        assert_eq!(frames_from(0, 40, 4, 10), vec![0, 10, 20, 30]);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let f = sample_frames(2, 4, 10, &mut r);
            assert_eq!(f.len(), 4);
            assert!(f.iter().all(|&i| i <= 1));
            let g = sample_frames(40, 4, 10, &mut r);
            assert!(g.windows(2).all(|w| w[1] == w[0] + 10) && g[3] < 40);
        }
        let a = sample_frames(100, 4, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_frames(100, 4, 3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn adamw_first_step_and_zero_grad() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -2.0]), false);
        let mut state = AdamState::default();
        let zero = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.0, 0.0]))]);
        adamw_step(&mut store, &zero, &mut state, 1e-3, 0.0).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0, -2.0]);

        let mut state = AdamState::default();
        let one = BTreeMap::from([("w".to_string(), Tensor::vector(vec![1.0, 1.0]))]);
        adamw_step(&mut store, &one, &mut state, 1e-3, 0.0).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9 && (w[1] - (-2.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn decay_only_where_flagged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0]), true);
        store.insert("b", Tensor::vector(vec![1.0]), false);
        let zero = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.0])), ("b".to_string(), Tensor::vector(vec![0.0]))]);
        adamw_step(&mut store, &zero, &mut AdamState::default(), 0.1, 0.5).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[0.95]);
        assert_eq!(store.get("b").unwrap().data(), &[1.0]);
    }

    #[test]
    fn config_toml_round_trip_and_aliases() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let c = TrainConfig::from_toml("lr = 0.001\nT = 2\n\"θ\" = 0.3\nselection_merge = \"union_max\"\n").unwrap();
        assert_eq!((c.lr, c.t, c.theta, c.selection_merge), (0.001, 2, 0.3, SelectionMerge::UnionMax));
        assert!(TrainConfig::from_toml("learning_rate = 1.0").is_err());
        assert!(TrainConfig::from_toml("P = 0").is_err());
        assert!(TrainConfig::from_toml("lr = -1.0").is_err());
    }

    #[test]
    fn fingerprint_ignores_epochs_only() {
        let a = TrainConfig::default();
        let b = TrainConfig { epochs: 7, ..a.clone() };
        let c = TrainConfig { lr: 2e-4, ..a.clone() };
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
