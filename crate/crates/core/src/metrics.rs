//! Segmentation metrics on patch-grid masks: IoU, boundary F-measure, and
//! the split-level report (Overall IoU, Mean IoU, J, F, J&F).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::schema::{AugmentedExpressionSet, ClipSample};

/// Boundary tolerance in patches.
pub const DEFAULT_BOUNDARY_TOL: f64 = 1.0;

fn same_len(op: &'static str, a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(op, &[a.len()], &[b.len()]));
    }
    Ok(())
}

fn counts(a: &[bool], b: &[bool]) -> (usize, usize) {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    (inter, union)
}

/// `|a ∩ b| / |a ∪ b|`, and 1 when both masks are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    same_len("iou", a, b)?;
    let (i, u) = counts(a, b);
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Foreground cells with a 4-neighbour outside the mask (cells beyond the
/// grid edge count as outside).
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !(at(yi - 1, xi) && at(yi + 1, xi) && at(yi, xi - 1) && at(yi, xi + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn fraction_within(from: &[(usize, usize)], to: &[(usize, usize)], tol: f64) -> f64 {
    let hit = from
        .iter()
        .filter(|(y, x)| {
            to.iter().any(|(v, u)| {
                let dy = *y as f64 - *v as f64;
                let dx = *x as f64 - *u as f64;
                dy * dy + dx * dx <= tol * tol
            })
        })
        .count();
    hit as f64 / from.len() as f64
}

/// Boundary F-measure of prediction `a` against reference `b` on an `h×w`
/// grid: precision is the share of `a`'s boundary within `tol` (Euclidean)
/// of `b`'s boundary, recall the converse.
pub fn boundary_f(a: &[bool], b: &[bool], h: usize, w: usize, tol: f64) -> Result<f64> {
    same_len("boundary_f", a, b)?;
    if a.len() != h * w {
        return Err(Error::dim("boundary_f", &[a.len()], &[h, w]));
    }
    let (ba, bb) = (boundary(a, h, w), boundary(b, h, w));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let p = fraction_within(&ba, &bb, tol);
    let r = fraction_within(&bb, &ba, tol);
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Nearest-neighbour expansion of a patch mask to pixels.
pub fn expand_to_pixels(mask: &[bool], h: usize, w: usize, patch: usize) -> Vec<bool> {
    let (ph, pw) = (h * patch, w * patch);
    (0..ph * pw).map(|i| mask[(i / pw / patch) * w + (i % pw) / patch]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    /// Intersection over union pooled over the clip's frames.
    pub iou: f64,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    pub intersection: usize,
    pub union: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_iou: f64,
    pub mean_iou: f64,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JandF")]
    pub j_and_f: f64,
    pub n_clips: usize,
    pub per_clip: Vec<ClipMetrics>,
}

/// Per-frame masks of one clip: prediction and reference.
pub struct ClipMasks<'a> {
    pub clip_id: &'a str,
    pub h: usize,
    pub w: usize,
    pub predicted: &'a [Vec<bool>],
    pub reference: &'a [Vec<bool>],
}

pub fn clip_metrics(c: &ClipMasks<'_>, tol: f64) -> Result<ClipMetrics> {
    if c.predicted.len() != c.reference.len() || c.predicted.is_empty() {
        return Err(Error::dim("clip_metrics", &[c.predicted.len()], &[c.reference.len()]));
    }
    let (mut inter, mut union) = (0, 0);
    let (mut j, mut f) = (0.0, 0.0);
    for (p, r) in c.predicted.iter().zip(c.reference) {
        same_len("clip_metrics", p, r)?;
        let (i, u) = counts(p, r);
        inter += i;
        union += u;
        j += iou(p, r)?;
        f += boundary_f(p, r, c.h, c.w, tol)?;
    }
    let n = c.predicted.len() as f64;
    Ok(ClipMetrics {
        clip_id: c.clip_id.to_string(),
        iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        j: j / n,
        f: f / n,
        intersection: inter,
        union,
    })
}

/// Aggregates per-clip metrics in the given order.
pub fn summarize(per_clip: Vec<ClipMetrics>) -> Result<EvalReport> {
    if per_clip.is_empty() {
        return Err(Error::arg("per_clip", "evaluation needs at least one clip"));
    }
    let n = per_clip.len() as f64;
    let inter: usize = per_clip.iter().map(|c| c.intersection).sum();
    let union: usize = per_clip.iter().map(|c| c.union).sum();
    let mean = |f: fn(&ClipMetrics) -> f64| per_clip.iter().map(f).sum::<f64>() / n;
    let (j, f) = (mean(|c| c.j), mean(|c| c.f));
    Ok(EvalReport {
        overall_iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        mean_iou: mean(|c| c.iou),
        j,
        f,
        j_and_f: (j + f) / 2.0,
        n_clips: per_clip.len(),
        per_clip,
    })
}

pub fn evaluate_masks(clips: &[ClipMasks<'_>], tol: f64) -> Result<EvalReport> {
    summarize(clips.iter().map(|c| clip_metrics(c, tol)).collect::<Result<_>>()?)
}

/// Oracle masks of a clip as per-frame booleans.
pub fn oracle_masks(clip: &ClipSample) -> Result<Vec<Vec<bool>>> {
    if clip.oracle_masks.is_none() {
        return Err(Error::Validation {
            field: format!("{}.oracle_masks", clip.clip_id),
            rule: "evaluation requires ground-truth masks".into(),
        });
    }
    Ok((0..clip.t)
        .map(|t| clip.oracle_mask(t).expect("checked").iter().map(|v| *v > 0.5).collect())
        .collect())
}

/// Predicts every clip's masks from its original expression alone and
/// scores them against the oracle masks. Clips run on up to `workers`
/// threads; the report keeps the input order.
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore,
    data: &[(ClipSample, AugmentedExpressionSet)],
    tol: f64,
    workers: usize,
) -> Result<EvalReport> {
    let per_clip = crate::parallel::map_ordered(data, workers, |_, (clip, set)| {
        let reference = oracle_masks(clip)?;
        let predicted = model.infer_masks(store, clip, &set.original)?;
        clip_metrics(
            &ClipMasks { clip_id: &clip.clip_id, h: clip.grid_h, w: clip.grid_w, predicted: &predicted, reference: &reference },
            tol,
        )
    });
    summarize(per_clip.into_iter().collect::<Result<_>>()?)
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip_id,iou,J,F,intersection,union\n");
        for c in &self.per_clip {
            let _ = writeln!(s, "{},{},{},{},{},{}", c.clip_id, c.iou, c.j, c.f, c.intersection, c.union);
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, json_path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(json_path, text)?;
        std::fs::write(json_path.with_extension("csv"), self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, cells: &[(usize, usize)]) -> Vec<bool> {
        let mut m = vec![false; h * w];
        for (y, x) in cells {
            m[y * w + x] = true;
        }
        m
    }

    #[test]
    fn iou_examples() {
        let a = [true, true, false];
        let b = [false, true, true];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[false, false, true]).unwrap(), 0.0);
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(iou(&a, &[true]).is_err());
    }

    #[test]
    fn boundary_examples() {
        let a = grid(4, 4, &[(1, 1), (1, 2), (2, 1), (2, 2)]);
        let b = grid(4, 4, &[(1, 2), (1, 3), (2, 2), (2, 3)]);
        assert_eq!(boundary_f(&a, &a, 4, 4, 1.0).unwrap(), 1.0);
        assert_eq!(boundary_f(&a, &b, 4, 4, 1.0).unwrap(), 1.0);
        assert_eq!(boundary_f(&a, &[false; 16], 4, 4, 1.0).unwrap(), 0.0);
        assert_eq!(boundary_f(&[false; 16], &[false; 16], 4, 4, 1.0).unwrap(), 1.0);
        let far = grid(4, 4, &[(3, 3)]);
        let one = grid(4, 4, &[(0, 0)]);
        assert_eq!(boundary_f(&one, &far, 4, 4, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn interior_is_not_boundary() {
        let full = vec![true; 9];
        let b = boundary(&full, 3, 3);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(1, 1)));
    }

    #[test]
    fn report_conventions() {
        let gt = vec![grid(2, 2, &[(0, 0)]), grid(2, 2, &[(1, 1)])];
        let comp: Vec<Vec<bool>> = gt.iter().map(|m| m.iter().map(|b| !b).collect()).collect();
        let perfect = evaluate_masks(&[ClipMasks { clip_id: "a", h: 2, w: 2, predicted: &gt, reference: &gt }], 1.0).unwrap();
        for v in [perfect.overall_iou, perfect.mean_iou, perfect.j, perfect.f, perfect.j_and_f] {
            assert_eq!(v, 1.0);
        }
        let worst = evaluate_masks(&[ClipMasks { clip_id: "a", h: 2, w: 2, predicted: &comp, reference: &gt }], 1.0).unwrap();
        assert_eq!(worst.overall_iou, 0.0);
        assert!(worst.to_csv().starts_with("clip_id,iou,J,F"));
    }

    #[test]
    fn pixel_expansion() {
        let m = [true, false, false, true];
        let px = expand_to_pixels(&m, 2, 2, 2);
        assert_eq!(px.len(), 16);
        assert!(px[0] && px[1] && px[4] && px[5] && !px[2] && px[15]);
    }
}
