//! Browser demo over the core library. Every entry point is stateless: a
//! scene is regenerated from its seed on each call, and results cross the
//! boundary as JSON strings.
//!
//! The MIL view scores patches with untrained feature matching (patch tokens
//! against the mean of each expression's word tokens), so it shows how the
//! threshold shapes proposals and scores without needing a checkpoint.

use refvos::mil::{make_proposals, mil_scores, ClsWeights, MilConfig};
use refvos::numeric::{sigmoid, Tape, Tensor};
use refvos::objectives::{soft_iou_values, temporal_rank_loss, triples};
use refvos::schema::{ExpressionRecord, Polarity};
use refvos::synth::{describe, generate_example, WorldSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const MIN_GRID: usize = 8;
pub const MAX_GRID: usize = 16;
const DEMO_POSITIVES: usize = 3;
const DEMO_NEGATIVES: usize = 8;

/// The default world at `grid × grid`, with a short expression list.
pub fn demo_world(grid: usize) -> WorldSpec {
    let grid = grid.clamp(MIN_GRID, MAX_GRID);
    WorldSpec { grid_h: grid, grid_w: grid, p: DEMO_POSITIVES, n: DEMO_NEGATIVES, ..WorldSpec::default() }
}

#[derive(Serialize)]
pub struct ObjectView {
    pub text: String,
    pub color: String,
    pub extent: usize,
    /// Top-left (row, col) per frame.
    pub positions: Vec<(usize, usize)>,
    pub is_target: bool,
}

#[derive(Serialize)]
pub struct SceneView {
    pub grid_h: usize,
    pub grid_w: usize,
    pub frames: usize,
    pub objects: Vec<ObjectView>,
    pub expression: String,
    /// Target mask per frame, row-major.
    pub target_masks: Vec<Vec<bool>>,
}

pub fn scene(seed: u64, grid: usize) -> Result<SceneView, String> {
    let spec = demo_world(grid);
    let (g, _) = generate_example(&spec, seed, 0).map_err(|e| e.to_string())?;
    let nv = spec.n_patches();
    let oracle = g.clip.oracle_masks.as_deref().unwrap_or_default();
    Ok(SceneView {
        grid_h: spec.grid_h,
        grid_w: spec.grid_w,
        frames: spec.t,
        objects: g
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| ObjectView {
                text: describe(&spec, &o.attrs),
                color: spec.color_vocab[o.attrs.color].clone(),
                extent: o.extent,
                positions: o.positions.clone(),
                is_target: i == g.target,
            })
            .collect(),
        expression: g.expressions.original.text.clone(),
        target_masks: oracle.chunks(nv).map(|m| m.iter().map(|v| *v > 0.5).collect()).collect(),
    })
}

#[derive(Serialize)]
pub struct ExpressionScore {
    pub text: String,
    pub positive: bool,
    /// `σ(s)` per patch.
    pub probs: Vec<f64>,
    pub proposal: Vec<bool>,
    /// Frame-expression score `y`, in `[0, 1]`.
    pub y: f64,
    pub prob: f64,
}

#[derive(Serialize)]
pub struct MilView {
    pub theta: f64,
    pub frame: usize,
    pub expressions: Vec<ExpressionScore>,
}

fn pooled(e: &ExpressionRecord) -> Vec<f64> {
    let n = e.n_real().max(1) as f64;
    let mut out = vec![0.0; e.c];
    for i in (0..e.n_l).filter(|&i| e.pad_mask[i]) {
        for (o, x) in out.iter_mut().zip(e.token(i)) {
            *o += x / n;
        }
    }
    out
}

/// Proposals and dual-flow scores for every positive and negative of the
/// scene's augmented set on one frame.
pub fn mil(seed: u64, grid: usize, theta: f64, frame: usize) -> Result<MilView, String> {
    let spec = demo_world(grid);
    let (g, set) = generate_example(&spec, seed, 0).map_err(|e| e.to_string())?;
    let frame = frame.min(spec.t - 1);
    let (nv, c) = (spec.n_patches(), spec.c);
    let exprs: Vec<&ExpressionRecord> = set.training_expressions().collect();
    let scale = 1.0 / (c as f64).sqrt();

    let fz = Tensor::from_rows(&exprs.iter().map(|e| pooled(e)).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let v = Tensor::matrix(nv, c, g.clip.frame(frame).to_vec()).map_err(|e| e.to_string())?;
    let run = || -> refvos::Result<(Tensor, Vec<Vec<bool>>, Vec<f64>)> {
        let tape = Tape::new();
        let v = tape.constant(v.clone());
        let fz = tape.constant(fz.clone());
        let s = v.matmul_t(fz)?.scale(scale);
        let proposals = make_proposals(&s.value(), theta)?;
        let r = tape.constant(proposals.averaging_matrix()).matmul(v)?;
        let b_cls = tape.constant(Tensor::zeros(&[exprs.len()]));
        let scores = mil_scores(
            r,
            ClsWeights::Tied(fz),
            b_cls,
            fz.transpose()?,
            MilConfig { logit_scale: scale, cls_flow: true, smt_flow: true },
        )?;
        Ok(((*s.value()).clone(), proposals.masks, scores.y.value().data().to_vec()))
    };
    let (s, masks, y) = run().map_err(|e| e.to_string())?;
    let expressions = exprs
        .iter()
        .enumerate()
        .map(|(k, e)| ExpressionScore {
            text: e.text.clone(),
            positive: e.polarity == Polarity::Positive,
            probs: (0..nv).map(|j| sigmoid(s.get2(j, k))).collect(),
            proposal: masks[k].clone(),
            y: y[k],
            prob: sigmoid(y[k]),
        })
        .collect();
    Ok(MilView { theta, frame, expressions })
}

#[derive(Serialize)]
pub struct TripleTerm {
    pub t: usize,
    pub l: usize,
    pub n: usize,
    pub iou_tl: f64,
    pub iou_tn: f64,
    /// `max(0, IoU(t, n) − IoU(t, l) − ε)`.
    pub term: f64,
}

#[derive(Serialize)]
pub struct TemporalView {
    pub epsilon: f64,
    pub loss: f64,
    pub triples: Vec<TripleTerm>,
}

/// The ranking loss and its per-triple terms for per-frame probability maps.
pub fn temporal(frames: &[Vec<f64>], epsilon: f64) -> Result<TemporalView, String> {
    let n = frames.first().map_or(0, Vec::len);
    if n == 0 || frames.iter().any(|f| f.len() != n) {
        return Err("frames must be nonempty and of equal length".into());
    }
    let tape = Tape::new();
    let probs: Vec<_> = frames.iter().map(|f| tape.constant(Tensor::vector(f.clone()))).collect();
    let loss = temporal_rank_loss(&probs, epsilon, false).map_err(|e| e.to_string())?.map_or(0.0, |v| v.item());
    let triples = triples(frames.len())
        .into_iter()
        .map(|(t, l, n)| {
            let iou_tl = soft_iou_values(&frames[t], &frames[l]);
            let iou_tn = soft_iou_values(&frames[t], &frames[n]);
            TripleTerm { t, l, n, iou_tl, iou_tn, term: (iou_tn - iou_tl - epsilon).max(0.0) }
        })
        .collect();
    Ok(TemporalView { epsilon, loss, triples })
}

/// A `side × side` square per frame on a `grid × grid` board. `"constant"`
/// moves one patch right per frame; `"return"` does the same but puts the
/// last frame back at the start, so early frames look closer to it than to
/// their neighbours.
pub fn temporal_preset(name: &str, grid: usize, frames: usize, side: usize) -> Result<Vec<Vec<f64>>, String> {
    let grid = grid.clamp(MIN_GRID, MAX_GRID);
    let side = side.clamp(1, grid);
    if frames < 3 || frames > grid - side + 1 {
        return Err(format!("frames must be in 3..={}", grid - side + 1));
    }
    let square = |col0: usize| {
        let mut m = vec![0.0; grid * grid];
        for r in 0..side {
            for c in col0..col0 + side {
                m[r * grid + c] = 1.0;
            }
        }
        m
    };
    let mut out: Vec<Vec<f64>> = (0..frames).map(square).collect();
    match name {
        "constant" => {}
        "return" => out[frames - 1] = square(0),
        other => return Err(format!("unknown preset `{other}` (expected constant or return)")),
    }
    Ok(out)
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = scene)]
pub fn scene_js(seed: u32, grid: usize) -> Result<String, JsError> {
    to_js(scene(seed.into(), grid))
}

#[wasm_bindgen(js_name = mil)]
pub fn mil_js(seed: u32, grid: usize, theta: f64, frame: usize) -> Result<String, JsError> {
    to_js(mil(seed.into(), grid, theta, frame))
}

/// `frames_json` is an array of equal-length probability arrays.
#[wasm_bindgen(js_name = temporal)]
pub fn temporal_js(frames_json: &str, epsilon: f64) -> Result<String, JsError> {
    let frames: Vec<Vec<f64>> = serde_json::from_str(frames_json).map_err(|e| JsError::new(&e.to_string()))?;
    to_js(temporal(&frames, epsilon))
}

#[wasm_bindgen(js_name = temporalPreset)]
pub fn temporal_preset_js(name: &str, grid: usize, frames: usize, side: usize) -> Result<String, JsError> {
    to_js(temporal_preset(name, grid, frames, side))
}
