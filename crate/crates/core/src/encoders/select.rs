use serde::{Deserialize, Serialize};

use super::{Override, VisualStreams};
use crate::error::{Error, Result};
use crate::numeric::{cosine_matrix, topk_indices, Tensor, Var};

/// How selections for different expressions combine on the visual side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMerge {
    /// One refined visual stream per expression.
    #[default]
    PerExpression,
    /// A single visual stream; a token's relevance is its best cosine over
    /// all expressions.
    UnionMax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionConfig {
    pub k_v: usize,
    pub k_z: usize,
    /// 1-based encoder layers after which selection runs.
    pub layers: Vec<usize>,
    pub merge: SelectionMerge,
    pub enabled: bool,
    /// Add the selected visual tokens back (`v̌ = v + v̂`).
    pub select_visual: bool,
    /// Add the selected linguistic tokens back (`ž = z + ẑ`).
    pub select_linguistic: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k_v: 10,
            k_z: 10,
            layers: vec![3, 6, 9, 12],
            merge: SelectionMerge::PerExpression,
            enabled: true,
            select_visual: true,
            select_linguistic: true,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_v == 0 || self.k_z == 0 {
            return Err(Error::arg("K_V/K_Z", "selection counts must be >= 1"));
        }
        Ok(())
    }
}

/// Selected positions for one expression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    /// Sorted visual row indices (top-`K_V` within each frame).
    pub visual: Vec<usize>,
    /// Sorted linguistic token indices, never PAD.
    pub linguistic: Vec<usize>,
}

fn row_max(m: &Tensor) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn frame_topk(scores: &[f64], n_v: usize, k_v: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (f, chunk) in scores.chunks(n_v).enumerate() {
        out.extend(topk_indices(chunk, k_v)?.into_iter().map(|i| f * n_v + i));
    }
    out.sort_unstable();
    Ok(out)
}

fn real_positions(pad_mask: &[bool]) -> Vec<usize> {
    pad_mask.iter().enumerate().filter(|(_, p)| **p).map(|(i, _)| i).collect()
}

fn linguistic_topk(z: &Tensor, real: &[usize], kept: &Tensor, k_z: usize) -> Result<Vec<usize>> {
    let cos = cosine_matrix(&z.gather_rows(real), kept)?;
    let mut out: Vec<usize> = topk_indices(&row_max(&cos), k_z)?.into_iter().map(|i| real[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Selection indices for visual tokens `v` (frames of `n_v` consecutive
/// rows) against one expression `z` whose real tokens are flagged in
/// `pad_mask`. Returns `None` for an all-pad expression.
pub fn select_indices(
    v: &Tensor,
    n_v: usize,
    z: &Tensor,
    pad_mask: &[bool],
    k_v: usize,
    k_z: usize,
) -> Result<Option<Selection>> {
    if n_v == 0 || v.rows() % n_v != 0 || z.rows() != pad_mask.len() || v.cols() != z.cols() {
        return Err(Error::dim("select_indices", v.shape(), z.shape()));
    }
    let real = real_positions(pad_mask);
    if real.is_empty() {
        return Ok(None);
    }
    let scores = row_max(&cosine_matrix(v, &z.gather_rows(&real))?);
    let visual = frame_topk(&scores, n_v, k_v)?;
    let linguistic = linguistic_topk(z, &real, &v.gather_rows(&visual), k_z)?;
    Ok(Some(Selection { visual, linguistic }))
}

fn doubling(n: usize, idx: &[usize]) -> Vec<f64> {
    let mut f = vec![1.0; n];
    idx.iter().for_each(|&i| f[i] = 2.0);
    f
}

/// Single-pair selection: `v̌ = v + v̂`, `ž = z + ẑ`, where the hatted
/// tensors keep the selected rows and zero the rest.
pub fn bidir_select<'t>(v: Var<'t>, z: Var<'t>, pad_mask: &[bool], cfg: &SelectionConfig) -> Result<(Var<'t>, Var<'t>)> {
    cfg.validate()?;
    let (vv, zv) = (v.value(), z.value());
    let Some(sel) = select_indices(&vv, vv.rows(), &zv, pad_mask, cfg.k_v, cfg.k_z)? else {
        return Ok((v, z));
    };
    let v = if cfg.select_visual { v.scale_rows(&doubling(vv.rows(), &sel.visual))? } else { v };
    let z = if cfg.select_linguistic { z.scale_rows(&doubling(zv.rows(), &sel.linguistic))? } else { z };
    Ok((v, z))
}

/// One selection step over a batch of expressions.
pub(super) fn apply<'t>(
    streams: VisualStreams<'t>,
    z: Var<'t>,
    n_v: usize,
    pad_masks: &[Vec<bool>],
    cfg: &SelectionConfig,
) -> Result<(VisualStreams<'t>, Var<'t>)> {
    cfg.validate()?;
    let zv = z.value();
    let e = pad_masks.len();
    let n_l = zv.rows() / e;
    let base = streams.base.value();
    let mut z_factors = vec![1.0; zv.rows()];
    let z_block = |k: usize| zv.gather_rows(&(k * n_l..(k + 1) * n_l).collect::<Vec<_>>());

    let streams = match &streams.overrides {
        None => {
            // Shared stream: relevance is the best cosine over all real tokens.
            let all_real: Vec<usize> = pad_masks
                .iter()
                .enumerate()
                .flat_map(|(k, m)| real_positions(m).into_iter().map(move |l| k * n_l + l))
                .collect();
            if all_real.is_empty() {
                return Ok((streams, z));
            }
            let scores = row_max(&cosine_matrix(&base, &zv.gather_rows(&all_real))?);
            let visual = frame_topk(&scores, n_v, cfg.k_v)?;
            let kept = base.gather_rows(&visual);
            for (k, mask) in pad_masks.iter().enumerate() {
                let real = real_positions(mask);
                if real.is_empty() {
                    continue;
                }
                for l in linguistic_topk(&z_block(k), &real, &kept, cfg.k_z)? {
                    z_factors[k * n_l + l] = 2.0;
                }
            }
            if cfg.select_visual {
                VisualStreams::shared(streams.base.scale_rows(&doubling(base.rows(), &visual))?)
            } else {
                streams
            }
        }
        Some(overrides) => {
            let cos_base = cosine_matrix(&base, &zv)?;
            let mut new_overrides = Vec::with_capacity(e);
            for (k, (mask, old)) in pad_masks.iter().zip(overrides).enumerate() {
                let real = real_positions(mask);
                if real.is_empty() {
                    new_overrides.push(old.clone());
                    continue;
                }
                let mut scores: Vec<f64> = (0..base.rows())
                    .map(|j| {
                        real.iter()
                            .map(|&l| cos_base.get2(j, k * n_l + l))
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect();
                let old_rows = old.rows.map(|r| r.value());
                if let Some(r) = &old_rows {
                    let zk = z_block(k).gather_rows(&real);
                    for (p, s) in row_max(&cosine_matrix(r, &zk)?).into_iter().enumerate() {
                        scores[old.idx[p]] = s;
                    }
                }
                let visual = frame_topk(&scores, n_v, cfg.k_v)?;
                let kept_rows: Vec<Vec<f64>> = visual
                    .iter()
                    .map(|&j| match (old.idx.binary_search(&j), &old_rows) {
                        (Ok(p), Some(r)) => r.row(p).to_vec(),
                        _ => base.row(j).to_vec(),
                    })
                    .collect();
                let kept = Tensor::from_rows(&kept_rows)?;
                for l in linguistic_topk(&z_block(k), &real, &kept, cfg.k_z)? {
                    z_factors[k * n_l + l] = 2.0;
                }
                if cfg.select_visual {
                    new_overrides.push(merge_override(streams.base, old, &visual)?);
                } else {
                    new_overrides.push(old.clone());
                }
            }
            VisualStreams { base: streams.base, overrides: Some(new_overrides) }
        }
    };
    let z = if cfg.select_linguistic && z_factors.iter().any(|f| *f != 1.0) {
        z.scale_rows(&z_factors)?
    } else {
        z
    };
    Ok((streams, z))
}

/// New override for one expression: the union of the previously overridden
/// rows and the newly selected ones, with the selected rows doubled.
fn merge_override<'t>(base: Var<'t>, old: &Override<'t>, selected: &[usize]) -> Result<Override<'t>> {
    let mut idx: Vec<usize> = old.idx.iter().chain(selected).copied().collect();
    idx.sort_unstable();
    idx.dedup();
    let mut from_base = Vec::new();
    let mut from_old = Vec::new();
    // Position of each output row in concat([base rows, old rows]).
    let mut source = Vec::with_capacity(idx.len());
    for &j in &idx {
        match old.idx.binary_search(&j) {
            Ok(p) => {
                source.push((true, from_old.len()));
                from_old.push(p);
            }
            Err(_) => {
                source.push((false, from_base.len()));
                from_base.push(j);
            }
        }
    }
    let mut parts = Vec::new();
    if !from_base.is_empty() {
        parts.push(base.gather_rows(&from_base)?);
    }
    if let Some(r) = old.rows.filter(|_| !from_old.is_empty()) {
        parts.push(r.gather_rows(&from_old)?);
    }
    let perm: Vec<usize> = source
        .iter()
        .map(|&(is_old, p)| if is_old { from_base.len() + p } else { p })
        .collect();
    let factors: Vec<f64> = idx
        .iter()
        .map(|j| if selected.binary_search(j).is_ok() { 2.0 } else { 1.0 })
        .collect();
    let rows = Var::concat_rows(&parts)?.gather_rows(&perm)?.scale_rows(&factors)?;
    Ok(Override { idx, rows: Some(rows) })
}
