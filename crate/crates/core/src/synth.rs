//! Procedural "videos": blocks with shape/color/motion attributes moving on a
//! patch grid, with exact oracle masks and attribute-tuple expressions.
//!
//! Patch tokens are sums of word embeddings drawn from a seeded codebook, and
//! expression tokens come from the same codebook, so a visual patch and the
//! words describing it share structure that the model has to learn to align.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::schema::{
    save_example, AugmentedExpressionSet, ClipSample, DatasetManifest, ExpressionRecord, ManifestEntry, Polarity, SplitManifest,
};

const BACKGROUND_WORD: &str = "<background>";
const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub shape_vocab: Vec<String>,
    pub color_vocab: Vec<String>,
    /// Names from: still, right, left, up, down, up-right, up-left, down-right, down-left.
    pub motion_vocab: Vec<String>,
    pub n_objects_range: [usize; 2],
    pub extent_range: [usize; 2],
    pub noise_sigma: f64,
    pub codebook_seed: u64,
    /// Stored frames per clip.
    #[serde(rename = "T")]
    pub t: usize,
    /// Source-frame spacing between stored frames.
    pub frame_spacing: usize,
    /// Padded expression length.
    #[serde(rename = "N_l")]
    pub n_l: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Chance that a distractor copies one attribute of the target.
    pub distractor_share_prob: f64,
}

const SHAPES: [&str; 24] = [
    "square", "circle", "triangle", "diamond", "star", "cross", "heart", "hexagon", "pentagon", "octagon",
    "oval", "ring", "arrow", "crescent", "trapezoid", "rhombus", "kite", "spiral", "bolt", "cloud", "drop",
    "leaf", "bell", "key",
];
const COLORS: [&str; 24] = [
    "red", "green", "blue", "yellow", "purple", "orange", "pink", "brown", "black", "white", "gray", "cyan",
    "magenta", "teal", "navy", "olive", "maroon", "lime", "gold", "silver", "beige", "coral", "violet",
    "indigo",
];
const MOTIONS: [&str; 9] = [
    "still", "right", "left", "up", "down", "up-right", "up-left", "down-right", "down-left",
];

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            grid_h: 16,
            grid_w: 16,
            c: 64,
            shape_vocab: SHAPES.iter().map(|s| s.to_string()).collect(),
            color_vocab: COLORS.iter().map(|s| s.to_string()).collect(),
            motion_vocab: MOTIONS.iter().map(|s| s.to_string()).collect(),
            n_objects_range: [2, 4],
            extent_range: [3, 4],
            noise_sigma: 0.3,
            codebook_seed: 1234,
            t: 4,
            frame_spacing: 10,
            n_l: 16,
            p: 6,
            n: 48,
            distractor_share_prob: 0.5,
        }
    }
}

pub fn motion_velocity(name: &str) -> Option<(i64, i64)> {
    Some(match name {
        "still" => (0, 0),
        "right" => (0, 1),
        "left" => (0, -1),
        "up" => (-1, 0),
        "down" => (1, 0),
        "up-right" => (-1, 1),
        "up-left" => (-1, -1),
        "down-right" => (1, 1),
        "down-left" => (1, -1),
        _ => return None,
    })
}

impl WorldSpec {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.shape_vocab.is_empty() || self.color_vocab.is_empty() || self.motion_vocab.is_empty() {
            return bad("attribute vocabularies must be nonempty");
        }
        if let Some(m) = self.motion_vocab.iter().find(|m| motion_velocity(m).is_none()) {
            return bad(&format!("unknown motion `{m}`"));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.c == 0 || self.t == 0 || self.n_l == 0 {
            return bad("grid, C, T and N_l must be positive");
        }
        let [lo, hi] = self.n_objects_range;
        if lo == 0 || lo > hi {
            return bad("n_objects_range must satisfy 1 <= min <= max");
        }
        let [elo, ehi] = self.extent_range;
        if elo == 0 || elo > ehi || ehi > self.grid_h.min(self.grid_w) {
            return bad("extent_range must fit the grid");
        }
        if self.p == 0 || self.n == 0 {
            return bad("P and N must be >= 1");
        }
        Ok(())
    }

    /// Stable hex digest of the spec, recorded in manifests.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("spec serializes");
        format!("{:016x}", rng::fnv1a64(text.as_bytes()))
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            seed: self.codebook_seed,
            c: self.c,
        }
    }
}

/// Word → embedding, each drawn from its own seeded unit-Gaussian stream.
#[derive(Clone, Copy, Debug)]
pub struct Codebook {
    seed: u64,
    c: usize,
}

impl Codebook {
    pub fn new(seed: u64, c: usize) -> Self {
        Self { seed, c }
    }

    pub fn dim(&self) -> usize {
        self.c
    }

    pub fn embed(&self, word: &str) -> Vec<f64> {
        let mut r = rng::stream(self.seed, "codebook", rng::fnv1a64(word.as_bytes()));
        (0..self.c).map(|_| r.sample(StandardNormal)).collect()
    }
}

/// Lowercased whitespace tokens with surrounding punctuation (other than `-`) removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '-' && c != '<' && c != '>')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Token features for `text`, truncated or PAD-filled to `n_l` rows.
pub fn featurize(text: &str, polarity: Polarity, confidence: f64, codebook: &Codebook, n_l: usize) -> ExpressionRecord {
    let c = codebook.dim();
    let words = tokenize(text);
    let mut tokens = vec![0.0; n_l * c];
    let mut pad_mask = vec![false; n_l];
    for (i, w) in words.iter().take(n_l).enumerate() {
        tokens[i * c..(i + 1) * c].copy_from_slice(&codebook.embed(w));
        pad_mask[i] = true;
    }
    ExpressionRecord {
        text: text.to_string(),
        polarity,
        confidence,
        tokens,
        pad_mask,
        n_l,
        c,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: usize,
    pub color: usize,
    pub motion: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub attrs: Attributes,
    /// Top-left (row, col) per stored frame.
    pub positions: Vec<(usize, usize)>,
    /// Side of the square footprint.
    pub extent: usize,
}

impl SceneObject {
    pub fn covers(&self, t: usize, row: usize, col: usize) -> bool {
        let (r, c) = self.positions[t];
        row >= r && row < r + self.extent && col >= c && col < c + self.extent
    }

    pub fn footprint(&self, t: usize, spec: &WorldSpec) -> Vec<f64> {
        let mut m = vec![0.0; spec.n_patches()];
        for row in 0..spec.grid_h {
            for col in 0..spec.grid_w {
                if self.covers(t, row, col) {
                    m[row * spec.grid_w + col] = 1.0;
                }
            }
        }
        m
    }
}

pub fn describe(spec: &WorldSpec, a: &Attributes) -> String {
    let motion = &spec.motion_vocab[a.motion];
    let phrase = if motion == "still" {
        "staying still".to_string()
    } else {
        format!("moving {motion}")
    };
    format!("{} {} {}", spec.color_vocab[a.color], spec.shape_vocab[a.shape], phrase)
}

#[derive(Clone, Debug)]
pub struct GeneratedClip {
    pub clip: ClipSample,
    /// Original expression only; [`synth_augment`] fills positives and negatives.
    pub expressions: AugmentedExpressionSet,
    pub target: usize,
    pub objects: Vec<SceneObject>,
}

fn random_attrs(spec: &WorldSpec, r: &mut impl Rng) -> Attributes {
    Attributes {
        shape: r.random_range(0..spec.shape_vocab.len()),
        color: r.random_range(0..spec.color_vocab.len()),
        motion: r.random_range(0..spec.motion_vocab.len()),
    }
}

fn place(spec: &WorldSpec, extent: usize, motion: &str, placed: &[SceneObject], r: &mut impl Rng) -> Option<Vec<(usize, usize)>> {
    let (dr, dc) = motion_velocity(motion).expect("validated motion");
    let span = spec.t as i64 - 1;
    let (h, w, e) = (spec.grid_h as i64, spec.grid_w as i64, extent as i64);
    let range = |d: i64, size: i64| {
        let lo = (-d * span).max(0);
        let hi = (size - e - d * span).min(size - e);
        (lo <= hi).then_some((lo, hi))
    };
    let (rlo, rhi) = range(dr, h)?;
    let (clo, chi) = range(dc, w)?;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let r0 = r.random_range(rlo..=rhi);
        let c0 = r.random_range(clo..=chi);
        let positions: Vec<(usize, usize)> = (0..spec.t as i64)
            .map(|t| ((r0 + dr * t) as usize, (c0 + dc * t) as usize))
            .collect();
        let overlaps = placed.iter().any(|o| {
            (0..spec.t).any(|t| {
                let (a, b) = (positions[t], o.positions[t]);
                a.0 < b.0 + o.extent && b.0 < a.0 + extent && a.1 < b.1 + o.extent && b.1 < a.1 + extent
            })
        });
        if !overlaps {
            return Some(positions);
        }
    }
    None
}

/// Generates one clip deterministically from `(spec, seed)`. Object 0 is the
/// referred target.
pub fn generate_clip(spec: &WorldSpec, seed: u64) -> Result<GeneratedClip> {
    spec.validate()?;
    let mut r = rng::stream(seed, "clip", 0);
    let codebook = spec.codebook();
    let [lo, hi] = spec.n_objects_range;
    let n_objects = r.random_range(lo..=hi);

    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let mut attrs = random_attrs(spec, &mut r);
        if i > 0 && r.random_bool(spec.distractor_share_prob.clamp(0.0, 1.0)) {
            let target = &objects[0].attrs;
            match r.random_range(0..3) {
                0 => attrs.shape = target.shape,
                1 => attrs.color = target.color,
                _ => attrs.motion = target.motion,
            }
        }
        let mut tries = 0;
        while objects.iter().any(|o| o.attrs == attrs) {
            attrs = random_attrs(spec, &mut r);
            tries += 1;
            if tries > MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::Generation("cannot draw distinct attribute tuples".into()));
            }
        }
        let extent = r.random_range(spec.extent_range[0]..=spec.extent_range[1]);
        let positions = place(spec, extent, &spec.motion_vocab[attrs.motion], &objects, &mut r).ok_or_else(|| {
            Error::Generation(format!(
                "no room for object {i} after {MAX_PLACEMENT_ATTEMPTS} attempts (seed {seed})"
            ))
        })?;
        objects.push(SceneObject { attrs, positions, extent });
    }

    let nv = spec.n_patches();
    let c = spec.c;
    let background = codebook.embed(BACKGROUND_WORD);
    let object_embeds: Vec<Vec<f64>> = objects
        .iter()
        .map(|o| {
            let parts = [
                codebook.embed(&spec.shape_vocab[o.attrs.shape]),
                codebook.embed(&spec.color_vocab[o.attrs.color]),
                codebook.embed(&spec.motion_vocab[o.attrs.motion]),
            ];
            (0..c).map(|k| parts.iter().map(|p| p[k]).sum()).collect()
        })
        .collect();

    let mut frame_tokens = Vec::with_capacity(spec.t * nv * c);
    let mut masks = Vec::with_capacity(spec.t * nv);
    for t in 0..spec.t {
        for row in 0..spec.grid_h {
            for col in 0..spec.grid_w {
                let base = objects
                    .iter()
                    .position(|o| o.covers(t, row, col))
                    .map_or(&background, |i| &object_embeds[i]);
                for &v in base {
                    let noise: f64 = if spec.noise_sigma > 0.0 {
                        spec.noise_sigma * r.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    frame_tokens.push(v + noise);
                }
            }
        }
        masks.extend(objects[0].footprint(t, spec));
    }
    let start = r.random_range(0..=spec.frame_spacing);
    let clip_id = format!("clip-{seed:016x}");
    let clip = ClipSample {
        clip_id: clip_id.clone(),
        t: spec.t,
        grid_h: spec.grid_h,
        grid_w: spec.grid_w,
        c,
        frame_tokens,
        oracle_masks: Some(masks),
        frame_indices: (0..spec.t).map(|t| start + t * spec.frame_spacing).collect(),
    };
    let text = describe(spec, &objects[0].attrs);
    let original = featurize(&text, Polarity::Original, 1.0, &codebook, spec.n_l);
    Ok(GeneratedClip {
        clip,
        expressions: AugmentedExpressionSet {
            clip_id,
            original,
            positives: Vec::new(),
            negatives: Vec::new(),
        },
        target: 0,
        objects,
    })
}

fn size_word(extent: usize, spec: &WorldSpec) -> &'static str {
    if extent > spec.extent_range[0] {
        "large"
    } else {
        "small"
    }
}

/// Synthetic stand-in for expression augmentation: positives append redundant
/// true attributes to the original, negatives are one-attribute swaps of the
/// target plus the tuples of distractor objects.
pub fn synth_augment(g: &GeneratedClip, spec: &WorldSpec, seed: u64) -> Result<AugmentedExpressionSet> {
    let mut r = rng::stream(seed, "synth-augment", 0);
    let codebook = spec.codebook();
    let target = &g.objects[g.target];
    let a = &target.attrs;
    let color = &spec.color_vocab[a.color];
    let shape = &spec.shape_vocab[a.shape];
    let motion = &spec.motion_vocab[a.motion];
    let size = size_word(target.extent, spec);
    let moving = if motion == "still" {
        "staying still".to_string()
    } else {
        format!("moving {motion}")
    };
    let mut extras = vec![
        moving.clone(),
        format!("{size} {color} {shape}"),
        format!("the {shape} is {color}"),
        format!("a {size} {shape} {moving}"),
        format!("{color} object {moving}"),
        format!("the {color} one"),
        format!("a {shape} shape"),
        format!("{size} {color} block {moving}"),
    ];
    extras.shuffle(&mut r);
    let original = &g.expressions.original.text;
    let positives = (0..spec.p)
        .map(|i| {
            let text = format!("{original}. {}", extras[i % extras.len()]);
            let confidence = 1.2 - 0.4 * r.random::<f64>();
            featurize(&text, Polarity::Positive, confidence, &codebook, spec.n_l)
        })
        .collect();

    let mut texts: Vec<String> = Vec::new();
    let push = |t: String, texts: &mut Vec<String>| {
        if t != *original && !texts.contains(&t) {
            texts.push(t);
        }
    };
    for (i, o) in g.objects.iter().enumerate() {
        if i != g.target {
            push(describe(spec, &o.attrs), &mut texts);
        }
    }
    let mut swaps = Vec::new();
    for s in (0..spec.shape_vocab.len()).filter(|&s| s != a.shape) {
        swaps.push(Attributes { shape: s, ..a.clone() });
    }
    for c in (0..spec.color_vocab.len()).filter(|&c| c != a.color) {
        swaps.push(Attributes { color: c, ..a.clone() });
    }
    for m in (0..spec.motion_vocab.len()).filter(|&m| m != a.motion) {
        swaps.push(Attributes { motion: m, ..a.clone() });
    }
    swaps.shuffle(&mut r);
    for s in &swaps {
        push(describe(spec, s), &mut texts);
    }
    if texts.len() < spec.n {
        return Err(Error::Generation(format!(
            "vocabulary yields {} distinct negatives, {} requested",
            texts.len(),
            spec.n
        )));
    }
    let negatives = texts
        .iter()
        .take(spec.n)
        .map(|t| featurize(t, Polarity::Negative, 1.0, &codebook, spec.n_l))
        .collect();
    Ok(AugmentedExpressionSet {
        clip_id: g.expressions.clip_id.clone(),
        original: g.expressions.original.clone(),
        positives,
        negatives,
    })
}

/// Clip plus augmented expressions, seeded per index. A crowded scene that
/// cannot be placed is redrawn from the next derived seed.
pub fn generate_example(spec: &WorldSpec, seed: u64, index: u64) -> Result<(GeneratedClip, AugmentedExpressionSet)> {
    const REDRAWS: u64 = 16;
    let mut last = None;
    for attempt in 0..REDRAWS {
        let clip_seed = rng::derive_seed(seed, "example", index * REDRAWS + attempt);
        match generate_clip(spec, clip_seed) {
            Ok(g) => {
                let set = synth_augment(&g, spec, clip_seed)?;
                return Ok((g, set));
            }
            Err(e @ Error::Generation(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Test clips are drawn from indices starting here, so train and test never
/// share a seed.
pub const TEST_INDEX_OFFSET: u64 = 1_000_000;

/// Generates `n_train + n_test` examples under `out` (one JSONL file each,
/// in `train/` and `test/`) plus `out/manifest.json`, which is returned.
pub fn write_dataset(spec: &WorldSpec, n_train: usize, n_test: usize, seed: u64, out: &Path, workers: usize) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("both splits need at least one clip".into()));
    }
    let mut splits = Vec::new();
    for (name, n, offset) in [("train", n_train, 0), ("test", n_test, TEST_INDEX_OFFSET)] {
        fs::create_dir_all(out.join(name))?;
        let indices: Vec<u64> = (0..n as u64).map(|i| offset + i).collect();
        let entries = crate::parallel::map_ordered(&indices, workers, |_, &index| -> Result<ManifestEntry> {
            let (g, set) = generate_example(spec, seed, index)?;
            let rel = PathBuf::from(name).join(format!("{}.jsonl", g.clip.clip_id));
            save_example(&out.join(&rel), &g.clip, &set)?;
            Ok(ManifestEntry { clip: rel.clone(), expressions: rel })
        });
        splits.push(SplitManifest { split: name.to_string(), entries: entries.into_iter().collect::<Result<_>>()? });
    }
    let manifest = DatasetManifest {
        seed,
        world_fingerprint: spec.fingerprint(),
        world: Some(spec.clone()),
        splits,
        root: out.to_path_buf(),
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}
