//! Toy visual and linguistic encoder stacks, bi-directional feature
//! selection, and the bi-directional attention interaction.
//!
//! Each encoder layer is `x ↦ LayerNorm(x + tanh(x·W + b))`: a C→C linear
//! map, a nonlinearity and a layer norm around an identity residual. All
//! layers act token-wise, which the per-expression visual streams exploit:
//! streams share one base tensor and only the rows touched by selection are
//! stored (and recomputed) per expression.

mod interact;
mod select;

pub use interact::{bidir_interact, interact_streams, InteractionBlock, InteractionConfig};
pub use select::{bidir_select, select_indices, Selection, SelectionConfig, SelectionMerge};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};
use crate::params::{BoundParams, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Visual,
    Linguistic,
}

impl Stream {
    fn prefix(self) -> &'static str {
        match self {
            Stream::Visual => "enc_v",
            Stream::Linguistic => "enc_z",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub stream: Stream,
    pub depth: usize,
    pub c: usize,
}

impl EncoderStack {
    pub fn new(stream: Stream, depth: usize, c: usize) -> Self {
        Self { stream, depth, c }
    }

    pub fn param_prefix(&self) -> &'static str {
        self.stream.prefix()
    }

    fn name(&self, layer: usize, part: &str) -> String {
        format!("{}.{layer:02}.{part}", self.stream.prefix())
    }

    /// Registers the stack's weights: Gaussian linear maps with standard
    /// deviation `gain / √C`, zero biases, unit layer-norm gains.
    pub fn init(&self, store: &mut ParamStore, gain: f64, rng: &mut impl Rng) {
        let c = self.c;
        for layer in 1..=self.depth {
            store.insert_gaussian(&self.name(layer, "w"), &[c, c], gain / (c as f64).sqrt(), rng);
            store.insert(self.name(layer, "b"), Tensor::zeros(&[c]), false);
            store.insert(self.name(layer, "ln_g"), Tensor::ones(&[c]), false);
            store.insert(self.name(layer, "ln_b"), Tensor::zeros(&[c]), false);
        }
    }

    /// Applies layer `layer` (1-based) to every row of `x`.
    pub fn layer<'t>(&self, p: &BoundParams<'t>, layer: usize, x: Var<'t>) -> Result<Var<'t>> {
        if layer == 0 || layer > self.depth {
            return Err(Error::arg("layer", format!("{layer} outside 1..={}", self.depth)));
        }
        let h = x
            .matmul(p.get(&self.name(layer, "w")))?
            .add_row(p.get(&self.name(layer, "b")))?
            .tanh();
        x.add(h)?
            .layer_norm(p.get(&self.name(layer, "ln_g")), p.get(&self.name(layer, "ln_b")))
    }

    /// Runs all layers without selection, returning every layer's output.
    pub fn encode<'t>(&self, p: &BoundParams<'t>, tokens: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut out = Vec::with_capacity(self.depth);
        let mut x = tokens;
        for layer in 1..=self.depth {
            x = self.layer(p, layer, x)?;
            out.push(x);
        }
        Ok(out)
    }
}

/// Masked mean over the real rows of `tokens` (`pad_mask[i]` is true for a
/// real token). An all-pad expression pools to the zero vector.
pub fn pool_expression(tokens: &Tensor, pad_mask: &[bool]) -> Result<Tensor> {
    if tokens.rows() != pad_mask.len() {
        return Err(Error::dim("pool_expression", tokens.shape(), &[pad_mask.len()]));
    }
    let c = tokens.cols();
    let mut out = vec![0.0; c];
    let n = pad_mask.iter().filter(|p| **p).count();
    if n == 0 {
        log::warn!("pooling an all-pad expression; using the zero vector");
        return Tensor::new(vec![c], out);
    }
    for (i, _) in pad_mask.iter().enumerate().filter(|(_, p)| **p) {
        for (o, v) in out.iter_mut().zip(tokens.row(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    Tensor::new(vec![c], out)
}

/// Pools a batch of `E` expressions stored as consecutive `n_l`-row blocks
/// of `tokens` into an `E×C` matrix, differentiably.
pub fn pool_expressions<'t>(tokens: Var<'t>, pad_masks: &[Vec<bool>]) -> Result<Var<'t>> {
    let e = pad_masks.len();
    let n_rows = tokens.shape()[0];
    let n_l = if e == 0 { 0 } else { n_rows / e };
    if e == 0 || n_l * e != n_rows || pad_masks.iter().any(|m| m.len() != n_l) {
        return Err(Error::dim("pool_expressions", &tokens.shape(), &[e, n_l]));
    }
    let mut weights = Tensor::zeros(&[e, n_rows]);
    for (k, mask) in pad_masks.iter().enumerate() {
        let n = mask.iter().filter(|p| **p).count();
        if n == 0 {
            log::warn!("pooling an all-pad expression; using the zero vector");
            continue;
        }
        for (l, _) in mask.iter().enumerate().filter(|(_, p)| **p) {
            weights.data_mut()[k * n_rows + k * n_l + l] = 1.0 / n as f64;
        }
    }
    tokens.tape().constant(weights).matmul(tokens)
}

/// Visual features for every expression. Without overrides all expressions
/// share `base`; otherwise expression `k` sees `base` with the rows
/// `overrides[k].idx` replaced by `overrides[k].rows`.
#[derive(Clone)]
pub struct VisualStreams<'t> {
    pub base: Var<'t>,
    pub overrides: Option<Vec<Override<'t>>>,
}

#[derive(Clone)]
pub struct Override<'t> {
    /// Sorted row indices into `base`.
    pub idx: Vec<usize>,
    /// `idx.len() × C`, or `None` when `idx` is empty.
    pub rows: Option<Var<'t>>,
}

impl<'t> VisualStreams<'t> {
    pub fn shared(base: Var<'t>) -> Self {
        Self { base, overrides: None }
    }

    pub fn per_expression(base: Var<'t>, n_expr: usize) -> Self {
        let empty = Override { idx: Vec::new(), rows: None };
        Self { base, overrides: Some(vec![empty; n_expr]) }
    }

    pub fn n_rows(&self) -> usize {
        self.base.shape()[0]
    }

    /// Applies a row-wise map to the base and all override rows in a single
    /// batched call.
    pub fn map_tokenwise(&self, f: impl Fn(Var<'t>) -> Result<Var<'t>>) -> Result<Self> {
        let Some(overrides) = &self.overrides else {
            return Ok(Self::shared(f(self.base)?));
        };
        let mut parts = vec![self.base];
        parts.extend(overrides.iter().filter_map(|o| o.rows));
        if parts.len() == 1 {
            return Ok(Self { base: f(self.base)?, overrides: self.overrides.clone() });
        }
        let all = f(Var::concat_rows(&parts)?)?;
        let n_base = self.n_rows();
        let base = all.slice_rows(0, n_base)?;
        let mut off = n_base;
        let mut out = Vec::with_capacity(overrides.len());
        for o in overrides {
            let rows = match o.rows {
                Some(_) => {
                    let r = all.slice_rows(off, off + o.idx.len())?;
                    off += o.idx.len();
                    Some(r)
                }
                None => None,
            };
            out.push(Override { idx: o.idx.clone(), rows });
        }
        Ok(Self { base, overrides: Some(out) })
    }

    /// The full feature matrix seen by expression `k`.
    pub fn stream(&self, k: usize) -> Result<Var<'t>> {
        match self.overrides.as_ref().and_then(|o| o.get(k)) {
            Some(Override { idx, rows: Some(rows) }) => self.base.with_rows(idx, *rows),
            _ => Ok(self.base),
        }
    }

    /// Value of expression `k`'s stream without recording anything.
    pub fn stream_value(&self, k: usize) -> Tensor {
        let mut out = (*self.base.value()).clone();
        if let Some(Override { idx, rows: Some(rows) }) = self.overrides.as_ref().and_then(|o| o.get(k)) {
            let c = out.cols();
            let r = rows.value();
            for (p, &i) in idx.iter().enumerate() {
                out.data_mut()[i * c..(i + 1) * c].copy_from_slice(r.row(p));
            }
        }
        out
    }

    /// Detached copy of all values, for caching across tapes.
    pub fn snapshot(&self) -> StreamsSnapshot {
        StreamsSnapshot {
            base: (*self.base.value()).clone(),
            overrides: self.overrides.as_ref().map(|os| {
                os.iter()
                    .map(|o| (o.idx.clone(), o.rows.map(|r| (*r.value()).clone())))
                    .collect()
            }),
        }
    }
}

/// Tape-independent copy of [`VisualStreams`].
#[derive(Clone, Debug, PartialEq)]
pub struct StreamsSnapshot {
    pub base: Tensor,
    pub overrides: Option<Vec<(Vec<usize>, Option<Tensor>)>>,
}

impl StreamsSnapshot {
    /// Records the snapshot on `tape` as constants, with expressions
    /// reordered by `order` (expression `k` of the result is `order[k]`).
    pub fn bind<'t>(&self, tape: &'t Tape, order: &[usize]) -> VisualStreams<'t> {
        let base = tape.constant(self.base.clone());
        let overrides = self.overrides.as_ref().map(|os| {
            order
                .iter()
                .map(|&k| Override {
                    idx: os[k].0.clone(),
                    rows: os[k].1.as_ref().map(|r| tape.constant(r.clone())),
                })
                .collect()
        });
        VisualStreams { base, overrides }
    }
}

/// Encoder outputs for one clip and its expression batch.
pub struct Encoded<'t> {
    pub visual: VisualStreams<'t>,
    /// Final linguistic token features, `E·N_l × C`.
    pub tokens: Var<'t>,
    /// Pooled expression features `F_Z`, `E × C`.
    pub pooled: Var<'t>,
}

/// Runs both stacks layer by layer with selection after the configured
/// layers. `visual` holds the `T·N_v` frame tokens, `linguistic` the `E`
/// expressions as consecutive `N_l`-row blocks.
#[allow(clippy::too_many_arguments)]
pub fn encode_pair<'t>(
    vis: &EncoderStack,
    lin: &EncoderStack,
    p: &BoundParams<'t>,
    visual: Var<'t>,
    n_v: usize,
    linguistic: Var<'t>,
    pad_masks: &[Vec<bool>],
    cfg: &SelectionConfig,
) -> Result<Encoded<'t>> {
    let e = pad_masks.len();
    let mut streams = match cfg.merge {
        SelectionMerge::PerExpression => VisualStreams::per_expression(visual, e),
        SelectionMerge::UnionMax => VisualStreams::shared(visual),
    };
    let mut z = linguistic;
    for layer in 1..=vis.depth.max(lin.depth) {
        if layer <= vis.depth {
            streams = streams.map_tokenwise(|x| vis.layer(p, layer, x))?;
        }
        if layer <= lin.depth {
            z = lin.layer(p, layer, z)?;
        }
        if cfg.enabled && cfg.layers.contains(&layer) {
            (streams, z) = select::apply(streams, z, n_v, pad_masks, cfg)?;
        }
    }
    let pooled = pool_expressions(z, pad_masks)?;
    Ok(Encoded { visual: streams, tokens: z, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check, GradCheckOptions};
    use crate::rng;

    #[test]
    fn zero_weights_reduce_to_layer_norm() {
        let stack = EncoderStack::new(Stream::Visual, 3, 4);
        let mut store = ParamStore::new();
        stack.init(&mut store, 0.0, &mut rng::stream(0, "t", 0));
        let tape = Tape::new();
        let p = BoundParams::bind(&tape, &store, |_| false);
        let x = Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.5, 2.0]).unwrap();
        let outs = stack.encode(&p, tape.constant(x.clone())).unwrap();
        assert_eq!(outs.len(), 3);
        let ones = tape.constant(Tensor::ones(&[4]));
        let zeros = tape.constant(Tensor::zeros(&[4]));
        let ln = tape.constant(x).layer_norm(ones, zeros).unwrap().value();
        for o in &outs {
            assert_eq!(o.shape(), vec![2, 4]);
        }
        for (a, b) in outs[0].value().data().iter().zip(ln.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn twelve_layer_gradient() {
        let c = 3;
        let stack = EncoderStack::new(Stream::Linguistic, 12, c);
        let mut store = ParamStore::new();
        stack.init(&mut store, 0.8, &mut rng::stream(1, "t", 0));
        let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
        let tensors: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        let x = Tensor::matrix(2, c, vec![0.3, -0.7, 1.1, 0.9, 0.2, -0.4]).unwrap();
        let r = finite_diff_check("encode12", &tensors, GradCheckOptions::default(), |tape, vars| {
            let mut s = ParamStore::new();
            for (n, t) in names.iter().zip(&tensors) {
                s.insert(n.clone(), t.clone(), true);
            }
            let mut p = BoundParams::bind(tape, &s, |_| false);
            p.replace(names.iter().cloned().zip(vars.iter().copied()));
            let out = stack.encode(&p, tape.constant(x.clone()))?;
            let w = tape.constant(Tensor::matrix(2, c, vec![1.0, -2.0, 0.5, 0.3, 0.7, -1.1])?);
            Ok(out[11].mul(w)?.sum())
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn pooling_examples() {
        let t = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 9.0, 9.0]).unwrap();
        let p = pool_expression(&t, &[true, true, false]).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = pool_expression(&t, &[false, true, false]).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0]);
        let p = pool_expression(&t, &[false, false, false]).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0]);

        let tape = Tape::new();
        let pooled = pool_expressions(tape.constant(t.clone()), &[vec![true, true, false]]).unwrap();
        assert_eq!(pooled.value().data(), &[0.5, 0.5]);
    }
}
