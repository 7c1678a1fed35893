//! Expression augmentation: ask a chat model for positive and negative
//! descriptions of a referred object, keep the positives an embedding model
//! deems consistent with the video, and assemble fixed-size expression sets.
//!
//! Services are traits so the pipeline runs offline against deterministic
//! mocks; OpenAI-compatible HTTP clients are provided behind the `http`
//! feature.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::schema::{
    save_example, save_jsonl, AugmentedExpressionSet, ClipSample, DatasetManifest, ExpressionRecord, Polarity, SplitManifest,
};
use crate::synth::{tokenize, Codebook};

/// Positives need a confidence strictly above this ratio.
pub const ACCEPT_THRESHOLD: f64 = 0.8;
/// Attempts at collecting `N` distinct negatives.
pub const NEGATIVE_ROUNDS: usize = 3;
const DEGENERATE_SIM: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatServiceConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token; empty for
    /// unauthenticated endpoints.
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedServiceConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    3
}

fn default_parallelism() -> usize {
    4
}

impl ChatServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            return Err(Error::Config("chat parallelism must be >= 1".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config("chat timeout must be positive".into()));
        }
        Ok(())
    }
}

impl EmbedServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config("embedding timeout must be positive".into()));
        }
        Ok(())
    }
}

pub trait ChatService: Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub trait EmbedService: Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

pub fn build_positive_prompt(original: &str, p: usize) -> String {
    format!(
        "Based on the original text expression {original}, and considering the video provided, please enrich {p} \
         positive descriptive sentences focusing on the following aspects: 1. Visual appearance: Describe the \
         instance's color, shape, size, texture, and any distinctive visual features. 2. Action and interaction: \
         Elaborate on the instance's action or interaction with other instances, including any movements, changes, \
         or notable actions it is performing."
    )
}

pub fn build_negative_prompt(original: &str, n: usize) -> String {
    format!(
        "Based on the original text expression {original}, and considering the video provided, please generate {n} \
         negative descriptive sentences for the given expression focusing on the following aspects: 1. Visual \
         appearance: Describe the instance with incorrect category or attributes (e.g., color, shape, size and \
         texture). 2. Action and interaction: Describe the instance doing a different action or in a different state \
         or with an incorrect spatial relationship."
    )
}

/// Text-only services cannot see the video; a caption stands in for it.
fn with_caption(prompt: String, caption: Option<&str>) -> String {
    match caption {
        Some(c) if !c.trim().is_empty() => format!("{prompt}\nVideo description: {}", c.trim()),
        _ => prompt,
    }
}

/// `c = sim_candidate / sim_original`.
pub fn confidence_score(sim_candidate: f64, sim_original: f64) -> Result<f64> {
    if sim_original.abs() < DEGENERATE_SIM {
        return Err(Error::arg("sim_original", format!("degenerate reference similarity {sim_original:e}")));
    }
    Ok(sim_candidate / sim_original)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateDescription {
    pub text: String,
    pub confidence: f64,
    pub accepted: bool,
}

impl CandidateDescription {
    pub fn new(text: String, confidence: f64) -> Self {
        Self { text, accepted: confidence > ACCEPT_THRESHOLD, confidence }
    }
}

/// Items of a numbered (or bulleted) list, numbering stripped and blank
/// lines dropped. An empty result is a parse error carrying the payload.
pub fn parse_numbered_list(raw: &str) -> Result<Vec<String>> {
    let items: Vec<String> = raw
        .lines()
        .map(|line| {
            let t = line.trim();
            let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
            let t = if digits > 0 {
                t[digits..].trim_start_matches(['.', ')', ':']).trim_start()
            } else {
                t.trim_start_matches(['-', '*', '•']).trim_start()
            };
            t.trim_matches('"').trim().to_string()
        })
        .filter(|t| !t.is_empty())
        .collect();
    if items.is_empty() {
        return Err(Error::Parse { line: 1, message: format!("no list items in service response: {raw:?}") });
    }
    Ok(items)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + crate::numeric::COSINE_DELTA)
}

/// What stands in for the video when scoring candidates.
#[derive(Clone, Debug, PartialEq)]
pub enum VideoEvidence {
    /// A precomputed video embedding in the embedder's space.
    Embedding(Vec<f64>),
    /// Text embedded with the same service (a caption, or the original
    /// expression when nothing better is available).
    Text(String),
}

#[derive(Clone, Debug)]
pub struct CreaRequest {
    pub clip_id: String,
    pub original: String,
    pub caption: Option<String>,
    pub video: VideoEvidence,
    pub p: usize,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct CreaOutput {
    pub set: AugmentedExpressionSet,
    pub candidates: Vec<CandidateDescription>,
}

/// Turns text into expression features for the linguistic encoder.
pub trait Featurizer: Sync {
    fn featurize(&self, text: &str, polarity: Polarity, confidence: f64) -> ExpressionRecord;
}

pub struct CodebookFeaturizer {
    pub codebook: Codebook,
    pub n_l: usize,
}

impl Featurizer for CodebookFeaturizer {
    fn featurize(&self, text: &str, polarity: Polarity, confidence: f64) -> ExpressionRecord {
        crate::synth::featurize(text, polarity, confidence, &self.codebook, self.n_l)
    }
}

/// Runs the whole pipeline for one clip.
pub fn run_crea(
    req: &CreaRequest,
    chat: &dyn ChatService,
    embed: &dyn EmbedService,
    featurizer: &dyn Featurizer,
) -> Result<CreaOutput> {
    if req.original.trim().is_empty() || req.p == 0 || req.n == 0 {
        return Err(Error::arg("request", "original must be nonempty and P, N >= 1"));
    }
    let caption = req.caption.as_deref();

    // Positives, scored against the video.
    let raw = chat.complete(&with_caption(build_positive_prompt(&req.original, req.p), caption))?;
    let texts = parse_numbered_list(&raw).inspect_err(|_| log::warn!("unparseable positive response: {raw}"))?;
    let mut queries = vec![req.original.clone()];
    queries.extend(texts.iter().cloned());
    if let VideoEvidence::Text(t) = &req.video {
        queries.push(t.clone());
    }
    let embs = embed.embed(&queries)?;
    if embs.len() != queries.len() {
        return Err(Error::Service(format!("embedder returned {} vectors for {} inputs", embs.len(), queries.len())));
    }
    let video = match &req.video {
        VideoEvidence::Embedding(v) => v.clone(),
        VideoEvidence::Text(_) => embs[queries.len() - 1].clone(),
    };
    let sim_original = cosine(&video, &embs[0]);
    let mut candidates = Vec::with_capacity(texts.len());
    for (text, e) in texts.iter().zip(&embs[1..]) {
        match confidence_score(cosine(&video, e), sim_original) {
            Ok(c) => candidates.push(CandidateDescription::new(text.clone(), c)),
            Err(err) => log::warn!("{}: discarding candidate {text:?}: {err}", req.clip_id),
        }
    }
    let mut positives: Vec<ExpressionRecord> = candidates
        .iter()
        .filter(|c| c.accepted)
        .take(req.p)
        .map(|c| featurizer.featurize(&format!("{} {}", c.text, req.original), Polarity::Positive, c.confidence))
        .collect();
    while positives.len() < req.p {
        positives.push(featurizer.featurize(&req.original, Polarity::Positive, 1.0));
    }

    // Negatives: distinct, excluding the original, re-prompting for more.
    let mut seen: BTreeSet<String> = BTreeSet::from([req.original.trim().to_lowercase()]);
    let mut negatives = Vec::with_capacity(req.n);
    for round in 0..NEGATIVE_ROUNDS {
        let missing = req.n - negatives.len();
        let mut prompt = with_caption(build_negative_prompt(&req.original, req.n), caption);
        if round > 0 {
            prompt.push_str(&format!(
                "\nProvide {missing} more sentences, different from the ones already given (attempt {}).",
                round + 1
            ));
        }
        let raw = chat.complete(&prompt)?;
        let items = parse_numbered_list(&raw).inspect_err(|_| log::warn!("unparseable negative response: {raw}"))?;
        for t in items {
            if negatives.len() == req.n {
                break;
            }
            if seen.insert(t.to_lowercase()) {
                negatives.push(featurizer.featurize(&t, Polarity::Negative, 1.0));
            }
        }
        if negatives.len() == req.n {
            break;
        }
    }
    if negatives.len() < req.n {
        return Err(Error::Generation(format!(
            "{}: only {} distinct negatives after {NEGATIVE_ROUNDS} rounds, need {}",
            req.clip_id,
            negatives.len(),
            req.n
        )));
    }

    let set = AugmentedExpressionSet {
        clip_id: req.clip_id.clone(),
        original: featurizer.featurize(&req.original, Polarity::Original, 1.0),
        positives,
        negatives,
    };
    Ok(CreaOutput { set, candidates })
}

/// Runs [`run_crea`] over many clips with at most `parallelism` requests in
/// flight. Results come back in request order.
pub fn run_crea_batch(
    reqs: &[CreaRequest],
    chat: &dyn ChatService,
    embed: &dyn EmbedService,
    featurizer: &dyn Featurizer,
    parallelism: usize,
) -> Vec<Result<CreaOutput>> {
    crate::parallel::map_ordered(reqs, parallelism, |_, req| run_crea(req, chat, embed, featurizer))
}

/// How the video is represented when scoring positives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvidenceSource {
    /// The clip's mean token ([`mean_pooled_clip`]); only meaningful when the
    /// embedder shares the clips' feature space, as the mock does.
    ClipEmbedding,
    /// The original expression embedded by the service itself.
    OriginalText,
}

/// One scored candidate, as logged to `candidates.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateLog {
    pub clip_id: String,
    #[serde(flatten)]
    pub candidate: CandidateDescription,
}

/// Augments every clip of `manifest` and writes a self-contained copy under
/// `out`: one JSONL per clip (clip plus new expression set), a
/// `candidates.jsonl` log of every scored positive, and `manifest.json`.
/// The original expression of each clip is the one re-augmented.
#[allow(clippy::too_many_arguments)]
pub fn augment_dataset(
    manifest: &DatasetManifest,
    out: &Path,
    chat: &dyn ChatService,
    embed: &dyn EmbedService,
    featurizer: &dyn Featurizer,
    evidence: EvidenceSource,
    (p, n): (usize, usize),
    parallelism: usize,
) -> Result<DatasetManifest> {
    let mut splits = Vec::new();
    let mut log = Vec::new();
    for split in &manifest.splits {
        let data = manifest.load_split(&split.split)?;
        let reqs: Vec<CreaRequest> = data
            .iter()
            .map(|(clip, set)| CreaRequest {
                clip_id: clip.clip_id.clone(),
                original: set.original.text.clone(),
                caption: None,
                video: match evidence {
                    EvidenceSource::ClipEmbedding => VideoEvidence::Embedding(mean_pooled_clip(clip)),
                    EvidenceSource::OriginalText => VideoEvidence::Text(set.original.text.clone()),
                },
                p,
                n,
            })
            .collect();
        let outputs = run_crea_batch(&reqs, chat, embed, featurizer, parallelism);
        fs::create_dir_all(out.join(&split.split))?;
        let mut entries = Vec::with_capacity(data.len());
        for ((entry, (clip, _)), res) in split.entries.iter().zip(&data).zip(outputs) {
            let crea = res?;
            let rel = Path::new(&split.split).join(entry.clip.file_name().unwrap_or(entry.clip.as_os_str()));
            save_example(&out.join(&rel), clip, &crea.set)?;
            log.extend(crea.candidates.into_iter().map(|candidate| CandidateLog { clip_id: clip.clip_id.clone(), candidate }));
            entries.push(crate::schema::ManifestEntry { clip: rel.clone(), expressions: rel });
        }
        splits.push(SplitManifest { split: split.split.clone(), entries });
    }
    save_jsonl(&log, &out.join("candidates.jsonl"))?;
    let augmented = DatasetManifest { splits, root: out.to_path_buf(), ..manifest.clone() };
    augmented.save(&out.join("manifest.json"))?;
    Ok(augmented)
}

/// Mean over frames of the mean patch token: the clip's embedding in
/// codebook space.
pub fn mean_pooled_clip(clip: &ClipSample) -> Vec<f64> {
    let c = clip.c;
    let mut out = vec![0.0; c];
    let n = clip.n_patches();
    for t in 0..clip.t {
        for patch in clip.frame(t).chunks(c) {
            for (o, v) in out.iter_mut().zip(patch) {
                *o += v / (n * clip.t) as f64;
            }
        }
    }
    out
}

/// Embeds text as the mean codebook vector of its words.
pub struct MockEmbedder {
    pub codebook: Codebook,
}

impl EmbedService for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts
            .iter()
            .map(|t| {
                let words = tokenize(t);
                let mut out = vec![0.0; self.codebook.dim()];
                for w in &words {
                    for (o, v) in out.iter_mut().zip(self.codebook.embed(w)) {
                        *o += v / words.len() as f64;
                    }
                }
                out
            })
            .collect())
    }
}

/// Deterministic stand-in for a chat model. Positives mix words of the
/// original with generic descriptive phrases; negatives swap in attribute
/// words. The output depends only on the prompt text.
pub struct MockChat;

const MOCK_PHRASES: [&str; 10] = [
    "with a smooth surface",
    "that keeps a steady pace",
    "clearly visible in every frame",
    "with sharp edges",
    "that stands out from the background",
    "near the middle of the scene",
    "with a uniform texture",
    "that never touches the other objects",
    "slightly larger than its neighbours",
    "with a faint shadow",
];

const MOCK_SWAPS: [&str; 16] = [
    "red", "blue", "green", "yellow", "purple", "orange", "circle", "square", "triangle", "star", "moving left",
    "moving right", "moving up", "moving down", "staying still", "spinning",
];

fn requested_count(prompt: &str, marker: &str) -> Option<usize> {
    let pos = prompt.find(marker)?;
    prompt[..pos].split_whitespace().last()?.parse().ok()
}

fn original_of(prompt: &str) -> &str {
    let start = "Based on the original text expression ";
    let rest = prompt.strip_prefix(start).unwrap_or(prompt);
    rest.split(", and considering").next().unwrap_or(rest)
}

impl ChatService for MockChat {
    fn complete(&self, prompt: &str) -> Result<String> {
        let original = original_of(prompt);
        let words: Vec<&str> = original.split_whitespace().collect();
        let mut r = rng::stream(0, "mock-chat", rng::fnv1a64(prompt.as_bytes()));
        use rand::Rng;
        let lines: Vec<String> = if let Some(p) = requested_count(prompt, "positive descriptive sentences") {
            (0..p)
                .map(|i| {
                    let phrase = MOCK_PHRASES[r.random_range(0..MOCK_PHRASES.len())];
                    // Half of the candidates drift away from the original's words.
                    if i % 2 == 0 {
                        format!("the {original} {phrase}")
                    } else {
                        let w = words.get(r.random_range(0..words.len().max(1))).copied().unwrap_or("object");
                        format!("a thing {phrase}, somewhat {w}")
                    }
                })
                .collect()
        } else if let Some(n) = requested_count(prompt, "negative descriptive sentences") {
            (0..n)
                .map(|_| {
                    let mut w: Vec<String> = words.iter().map(|s| s.to_string()).collect();
                    let swap = MOCK_SWAPS[r.random_range(0..MOCK_SWAPS.len())];
                    let at = r.random_range(0..w.len().max(1));
                    if w.is_empty() {
                        w.push(swap.to_string());
                    } else {
                        w[at] = swap.to_string();
                    }
                    let extra = MOCK_PHRASES[r.random_range(0..MOCK_PHRASES.len())];
                    format!("{} {extra}", w.join(" "))
                })
                .collect()
        } else {
            return Err(Error::Service("mock chat received an unrecognized prompt".into()));
        };
        Ok(lines.iter().enumerate().map(|(i, l)| format!("{}. {l}\n", i + 1)).collect())
    }
}

#[cfg(feature = "http")]
pub use http::{OpenAiChat, OpenAiEmbedder};

#[cfg(feature = "http")]
mod http {
    use std::time::Duration;

    use serde_json::{json, Value};

    use super::{ChatService, ChatServiceConfig, EmbedService, EmbedServiceConfig};
    use crate::error::{Error, Result};

    fn agent(timeout_secs: f64) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(timeout_secs)))
            .build()
            .into()
    }

    fn api_key(var: &str) -> Result<Option<String>> {
        if var.is_empty() {
            return Ok(None);
        }
        std::env::var(var)
            .map(Some)
            .map_err(|_| Error::Service(format!("environment variable {var} is not set")))
    }

    fn post(agent: &ureq::Agent, url: &str, key: Option<&str>, body: &Value) -> Result<Value> {
        let mut req = agent.post(url);
        if let Some(k) = key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Error::Service(format!("POST {url}: {e}")))?;
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| Error::Service(format!("POST {url}: unreadable response: {e}")))
    }

    /// OpenAI-compatible `/chat/completions` client.
    pub struct OpenAiChat {
        cfg: ChatServiceConfig,
        key: Option<String>,
        agent: ureq::Agent,
    }

    impl OpenAiChat {
        pub fn new(cfg: ChatServiceConfig) -> Result<Self> {
            cfg.validate()?;
            let key = api_key(&cfg.api_key_env)?;
            let agent = agent(cfg.timeout_secs);
            Ok(Self { cfg, key, agent })
        }
    }

    impl ChatService for OpenAiChat {
        fn complete(&self, prompt: &str) -> Result<String> {
            let body = json!({
                "model": self.cfg.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": 0,
            });
            let mut last = None;
            for attempt in 0..=self.cfg.max_retries {
                if attempt > 0 {
                    std::thread::sleep(Duration::from_millis(250 << attempt.min(6)));
                }
                match post(&self.agent, &self.cfg.endpoint, self.key.as_deref(), &body) {
                    Ok(v) => {
                        return v["choices"][0]["message"]["content"]
                            .as_str()
                            .map(str::to_string)
                            .ok_or_else(|| Error::Parse { line: 1, message: format!("no message content in {v}") });
                    }
                    Err(e) => {
                        log::warn!("chat request attempt {} failed: {e}", attempt + 1);
                        last = Some(e);
                    }
                }
            }
            Err(last.expect("at least one attempt"))
        }
    }

    /// OpenAI-compatible `/embeddings` client.
    pub struct OpenAiEmbedder {
        cfg: EmbedServiceConfig,
        key: Option<String>,
        agent: ureq::Agent,
    }

    impl OpenAiEmbedder {
        pub fn new(cfg: EmbedServiceConfig) -> Result<Self> {
            cfg.validate()?;
            let key = api_key(&cfg.api_key_env)?;
            let agent = agent(cfg.timeout_secs);
            Ok(Self { cfg, key, agent })
        }
    }

    impl EmbedService for OpenAiEmbedder {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            let body = json!({"model": self.cfg.model, "input": texts});
            let v = post(&self.agent, &self.cfg.endpoint, self.key.as_deref(), &body)?;
            let data = v["data"]
                .as_array()
                .ok_or_else(|| Error::Parse { line: 1, message: format!("no data array in {v}") })?;
            let mut out = vec![Vec::new(); data.len()];
            for (pos, item) in data.iter().enumerate() {
                let idx = item["index"].as_u64().map_or(pos, |i| i as usize);
                let emb = item["embedding"]
                    .as_array()
                    .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                    .ok_or_else(|| Error::Parse { line: 1, message: format!("bad embedding at {pos}") })?;
                *out.get_mut(idx).ok_or_else(|| Error::Parse { line: 1, message: format!("index {idx} out of range") })? =
                    emb;
            }
            Ok(out)
        }
    }
}
