//! Clips, expressions, manifests and their JSONL representation.
//!
//! Feature arrays are stored flat with explicit shape fields. Floats use the
//! shortest decimal that reloads bit-exactly, so `save(load(save(x)))` is
//! byte-identical to `save(x)`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::WorldSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSample {
    pub clip_id: String,
    #[serde(rename = "T")]
    pub t: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    #[serde(rename = "C")]
    pub c: usize,
    /// `T × N_v × C`, row-major.
    pub frame_tokens: Vec<f64>,
    /// `T × N_v` patch masks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_masks: Option<Vec<f64>>,
    /// Source-video frame position of each stored frame.
    pub frame_indices: Vec<usize>,
}

impl ClipSample {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// `N_v × C` tokens of frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.n_patches() * self.c;
        &self.frame_tokens[t * n..(t + 1) * n]
    }

    pub fn oracle_mask(&self, t: usize) -> Option<&[f64]> {
        let n = self.n_patches();
        self.oracle_masks.as_ref().map(|m| &m[t * n..(t + 1) * n])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionRecord {
    pub text: String,
    pub polarity: Polarity,
    pub confidence: f64,
    /// `N_l × C`, padded rows included.
    pub tokens: Vec<f64>,
    /// `true` for real tokens.
    pub pad_mask: Vec<bool>,
    #[serde(rename = "N_l")]
    pub n_l: usize,
    #[serde(rename = "C")]
    pub c: usize,
}

impl ExpressionRecord {
    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.c..(i + 1) * self.c]
    }

    pub fn n_real(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    /// Mean of the non-pad token features; zero when every position is PAD.
    pub fn pooled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.c];
        let n = self.n_real();
        if n == 0 {
            return out;
        }
        for (i, _) in self.pad_mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, v) in out.iter_mut().zip(self.token(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        out
    }

    pub fn with_polarity(mut self, polarity: Polarity, confidence: f64) -> Self {
        self.polarity = polarity;
        self.confidence = confidence;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedExpressionSet {
    pub clip_id: String,
    pub original: ExpressionRecord,
    pub positives: Vec<ExpressionRecord>,
    pub negatives: Vec<ExpressionRecord>,
}

impl AugmentedExpressionSet {
    /// Positives followed by negatives, the column order of `F_Z`.
    pub fn training_expressions(&self) -> impl Iterator<Item = &ExpressionRecord> {
        self.positives.iter().chain(&self.negatives)
    }
}

/// One JSONL line: either a clip or its expression set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Record {
    Clip(ClipSample),
    Expressions(AugmentedExpressionSet),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip: PathBuf,
    pub expressions: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: String,
    pub entries: Vec<ManifestEntry>,
}

/// Paths are relative to the manifest file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub world_fingerprint: String,
    /// The generating world, when the data is synthetic. Augmentation reads
    /// its codebook and expression length from here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<WorldSpec>,
    pub splits: Vec<SplitManifest>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&SplitManifest> {
        self.splits
            .iter()
            .find(|s| s.split == name)
            .ok_or_else(|| Error::Config(format!("manifest has no split `{name}`")))
    }

    /// Loads every (clip, expression set) pair of a split, validating both.
    pub fn load_split(&self, name: &str) -> Result<Vec<(ClipSample, AugmentedExpressionSet)>> {
        let split = self.split(name)?;
        split
            .entries
            .iter()
            .map(|e| {
                let clip = load_first::<ClipSample>(&self.root.join(&e.clip), |r| match r {
                    Record::Clip(c) => Some(c),
                    _ => None,
                })?;
                let exprs = load_first::<AugmentedExpressionSet>(&self.root.join(&e.expressions), |r| match r {
                    Record::Expressions(x) => Some(x),
                    _ => None,
                })?;
                for v in validate_clip(&clip).into_iter().chain(validate_expressions(&exprs)) {
                    return Err(Error::Validation {
                        field: format!("{}: {}", e.clip.display(), v.field),
                        rule: v.rule,
                    });
                }
                Ok((clip, exprs))
            })
            .collect()
    }
}

fn load_first<T>(path: &Path, pick: impl Fn(Record) -> Option<T>) -> Result<T> {
    load_jsonl::<Record>(path)?
        .into_iter()
        .find_map(pick)
        .ok_or_else(|| Error::Validation {
            field: path.display().to_string(),
            rule: "file holds no record of the requested kind".into(),
        })
}

/// Writes a clip and its expression set as a two-line JSONL file.
pub fn save_example(path: &Path, clip: &ClipSample, set: &AugmentedExpressionSet) -> Result<()> {
    save_jsonl(&[Record::Clip(clip.clone()), Record::Expressions(set.clone())], path)
}

pub fn to_jsonl_line<T: Serialize>(record: &T) -> Result<String> {
    Ok(serde_json::to_string(record)?)
}

pub fn save_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses one record per non-empty line; errors carry the 1-based line number.
pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

pub fn validate_clip(s: &ClipSample) -> Vec<Violation> {
    let mut v = Vec::new();
    let nv = s.n_patches();
    if s.t == 0 {
        v.push(Violation::new("T", "at least one frame"));
    }
    if s.c == 0 || nv == 0 {
        v.push(Violation::new("grid_h/grid_w/C", "dimensions must be positive"));
    }
    if s.frame_tokens.len() != s.t * nv * s.c {
        v.push(Violation::new("frame_tokens", format!("length must be T*N_v*C = {}", s.t * nv * s.c)));
    } else if s.frame_tokens.iter().any(|x| !x.is_finite()) {
        v.push(Violation::new("frame_tokens", "values must be finite"));
    }
    if let Some(m) = &s.oracle_masks {
        if m.len() != s.t * nv {
            v.push(Violation::new("oracle_masks", format!("length must be T*N_v = {}", s.t * nv)));
        }
        if m.iter().any(|&x| x != 0.0 && x != 1.0) {
            v.push(Violation::new("oracle_masks", "values must be 0 or 1"));
        }
    }
    if s.frame_indices.len() != s.t {
        v.push(Violation::new("frame_indices", "one index per frame"));
    }
    v
}

fn validate_record(r: &ExpressionRecord, name: &str, v: &mut Vec<Violation>) {
    if r.pad_mask.len() != r.n_l {
        v.push(Violation::new(format!("{name}.pad_mask"), "length must equal N_l"));
    }
    if r.tokens.len() != r.n_l * r.c {
        v.push(Violation::new(format!("{name}.tokens"), "length must equal N_l*C"));
    } else if r.tokens.iter().any(|x| !x.is_finite()) {
        v.push(Violation::new(format!("{name}.tokens"), "values must be finite"));
    }
    if !(r.confidence > 0.0) || !r.confidence.is_finite() {
        v.push(Violation::new(format!("{name}.confidence"), "must be finite and > 0"));
    }
}

pub fn validate_expressions(set: &AugmentedExpressionSet) -> Vec<Violation> {
    let mut v = Vec::new();
    validate_record(&set.original, "original", &mut v);
    if set.original.polarity != Polarity::Original {
        v.push(Violation::new("original.polarity", "must be `original`"));
    }
    for (i, p) in set.positives.iter().enumerate() {
        let name = format!("positives[{i}]");
        validate_record(p, &name, &mut v);
        if p.polarity != Polarity::Positive {
            v.push(Violation::new(format!("{name}.polarity"), "must be `positive`"));
        }
        if !p.text.contains(&set.original.text) {
            v.push(Violation::new(format!("{name}.text"), "concatenation rule: must contain the original expression"));
        }
    }
    for (i, n) in set.negatives.iter().enumerate() {
        let name = format!("negatives[{i}]");
        validate_record(n, &name, &mut v);
        if n.polarity != Polarity::Negative {
            v.push(Violation::new(format!("{name}.polarity"), "must be `negative`"));
        }
    }
    let c = set.original.c;
    let n_l = set.original.n_l;
    if set.training_expressions().any(|r| r.c != c || r.n_l != n_l) {
        v.push(Violation::new("tokens", "all expressions share N_l and C"));
    }
    v
}

/// Checks the static `P`/`N` counts downstream tensors rely on.
pub fn validate_counts(set: &AugmentedExpressionSet, p: usize, n: usize) -> Vec<Violation> {
    let mut v = Vec::new();
    if set.positives.len() != p {
        v.push(Violation::new("positives", format!("expected {p}, found {}", set.positives.len())));
    }
    if set.negatives.len() != n {
        v.push(Violation::new("negatives", format!("expected {n}, found {}", set.negatives.len())));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_clip() -> ClipSample {
        ClipSample {
            clip_id: "c0".into(),
            t: 1,
            grid_h: 2,
            grid_w: 2,
            c: 2,
            frame_tokens: vec![0.1, -0.2, 1.0 / 3.0, 4.0, 5.5, 6.0, 7.0, 1e-300],
            oracle_masks: Some(vec![1.0, 0.0, 0.0, 1.0]),
            frame_indices: vec![0],
        }
    }

    fn record(text: &str, polarity: Polarity) -> ExpressionRecord {
        ExpressionRecord {
            text: text.into(),
            polarity,
            confidence: 1.0,
            tokens: vec![1.0, 0.0, 0.0, 1.0, 9.0, 9.0],
            pad_mask: vec![true, true, false],
            n_l: 3,
            c: 2,
        }
    }

    #[test]
    fn empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        save_jsonl::<ClipSample>(&[], &p).unwrap();
        assert_eq!(fs::read(&p).unwrap().len(), 0);
        assert!(load_jsonl::<ClipSample>(&p).unwrap().is_empty());
    }

    #[test]
    fn clip_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let clip = tiny_clip();
        save_jsonl(&[clip.clone()], &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
        let back: Vec<ClipSample> = load_jsonl(&p).unwrap();
        assert_eq!(back, vec![clip]);
        save_jsonl(&back, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn truncated_line_cites_line_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(&p, "{\"clip_id\": \"x\", \"T\": 1,\n").unwrap();
        match load_jsonl::<ClipSample>(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validate_examples() {
        assert!(validate_clip(&tiny_clip()).is_empty());
        let mut half = tiny_clip();
        half.oracle_masks = Some(vec![1.0, 0.5, 0.0, 1.0]);
        let v = validate_clip(&half);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "oracle_masks");

        let set = AugmentedExpressionSet {
            clip_id: "c0".into(),
            original: record("red square", Polarity::Original),
            positives: vec![record("red square. moving right", Polarity::Positive)],
            negatives: vec![record("blue square", Polarity::Negative)],
        };
        assert!(validate_expressions(&set).is_empty());
        let mut bad = set.clone();
        bad.positives[0].text = "a large shape".into();
        let v = validate_expressions(&bad);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("concatenation"));
    }

    #[test]
    fn pooled_ignores_pad_rows() {
        let r = record("a", Polarity::Original);
        assert_eq!(r.pooled(), vec![0.5, 0.5]);
        let mut perturbed = r.clone();
        perturbed.tokens[4] = -100.0;
        assert_eq!(perturbed.pooled(), r.pooled());
    }
}
