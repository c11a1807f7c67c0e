//! Embedding vectors, the on-disk embedding cache, and the similarity metric.
//!
//! The default metric is the cosine of two text embeddings. A judge-model metric
//! ([`JudgeSimilarity`]) is available behind the same [`SimilarityBackend`] trait.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{content_hash, GenerationParams};
use crate::provider::{EmbeddingProvider, ProviderError, RetryPolicy, TextGenerator};
use crate::template::{PromptTemplate, TemplateError};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text at index {0} is empty")]
    EmptyText(usize),
    #[error("no texts to embed")]
    NoInput,
    #[error("provider failed for inputs {failed:?}: {source}")]
    Transport {
        failed: Vec<usize>,
        #[source]
        source: ProviderError,
    },
    #[error("provider contract violated: {0}")]
    ProviderContract(String),
    #[error("dimension mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("vector has non-finite entries")]
    NonFinite,
    #[error("embedding cache: {0}")]
    Cache(#[from] io::Error),
    #[error("judge reply has no parseable score: {0:?}")]
    JudgeFormat(String),
    #[error("judge call failed: {0}")]
    Judge(#[source] ProviderError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// A finite, nonzero embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::ZeroNorm);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(EmbedError::ZeroNorm);
        }
        Ok(Self { values })
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbedError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dims() != b.dims() {
        return Err(EmbedError::Shape(a.dims(), b.dims()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    // sqrt of the product (not the product of sqrts) makes cosine(v, v) exactly 1.
    let denom = (a.norm_squared() * b.norm_squared()).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        return Err(EmbedError::ZeroNorm);
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}

/// Content-addressed store of embeddings. Keys cover provider id, model name
/// and the text hash, so switching providers never serves stale vectors.
///
/// Vectors are persisted as raw little-endian `f64`s (one file per key), so a
/// hit is bit-identical to what was stored.
pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, EmbeddingVector>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            memory: RwLock::new(HashMap::new()),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            memory: RwLock::new(HashMap::new()),
        })
    }

    pub fn key(provider: &str, model: &str, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(provider.as_bytes());
        h.update([0x1f]);
        h.update(model.as_bytes());
        h.update([0x1f]);
        h.update(content_hash(text).as_bytes());
        hex::encode(h.finalize())
    }

    fn path_for(dir: &Path, key: &str) -> PathBuf {
        dir.join(&key[..2]).join(format!("{key}.f64"))
    }

    pub fn get(&self, key: &str) -> Result<Option<EmbeddingVector>, EmbedError> {
        if let Some(v) = self.memory.read().unwrap().get(key) {
            return Ok(Some(v.clone()));
        }
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let path = Self::path_for(dir, key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if bytes.len() % 8 != 0 {
            return Err(EmbedError::Cache(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{} is not a multiple of 8 bytes", path.display()),
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let v = EmbeddingVector::new(values)?;
        self.memory
            .write()
            .unwrap()
            .insert(key.to_owned(), v.clone());
        Ok(Some(v))
    }

    /// Last write wins; concurrent writers of the same key store identical bytes.
    pub fn put(&self, key: &str, v: &EmbeddingVector) -> Result<(), EmbedError> {
        if let Some(dir) = &self.dir {
            let path = Self::path_for(dir, key);
            fs::create_dir_all(path.parent().unwrap())?;
            let bytes: Vec<u8> = v.values.iter().flat_map(|x| x.to_le_bytes()).collect();
            let tmp = path.with_extension(format!(
                "tmp-{}-{:?}",
                std::process::id(),
                std::thread::current().id()
            ));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        self.memory
            .write()
            .unwrap()
            .insert(key.to_owned(), v.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.memory.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub batch_size: usize,
    pub retry: RetryPolicy,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            retry: RetryPolicy::default(),
        }
    }
}

/// Provider plus cache: the `embed_texts` entry point.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: EmbeddingCache,
    config: EmbedderConfig,
}

impl Embedder {
    pub fn new(
        provider: Arc<dyn EmbeddingProvider>,
        cache: EmbeddingCache,
        config: EmbedderConfig,
    ) -> Self {
        Self {
            provider,
            cache,
            config,
        }
    }

    pub fn provider_id(&self) -> &str {
        self.provider.provider_id()
    }

    pub fn model_name(&self) -> &str {
        self.provider.model_name()
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    /// One vector per input, all of equal dimension. The cache is consulted first;
    /// the provider only sees distinct misses, in batches of `batch_size`.
    pub fn embed_texts<S: AsRef<str>>(
        &self,
        texts: &[S],
    ) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::NoInput);
        }
        if let Some(i) = texts.iter().position(|t| t.as_ref().trim().is_empty()) {
            return Err(EmbedError::EmptyText(i));
        }
        let provider = self.provider.provider_id();
        let model = self.provider.model_name();
        let keys: Vec<String> = texts
            .iter()
            .map(|t| EmbeddingCache::key(provider, model, t.as_ref()))
            .collect();

        let mut found: HashMap<&str, EmbeddingVector> = HashMap::new();
        // (key, first input index) of each distinct miss, in input order.
        let mut misses: Vec<(&str, usize)> = Vec::new();
        let mut seen = HashSet::new();
        for (i, k) in keys.iter().enumerate() {
            if !seen.insert(k.as_str()) {
                continue;
            }
            match self.cache.get(k)? {
                Some(v) => {
                    found.insert(k, v);
                }
                None => misses.push((k, i)),
            }
        }

        let batch = self.config.batch_size.max(1);
        let mut failed_keys: HashSet<&str> = HashSet::new();
        let mut last_err = None;
        for chunk in misses.chunks(batch) {
            let inputs: Vec<String> = chunk
                .iter()
                .map(|(_, i)| texts[*i].as_ref().to_owned())
                .collect();
            match self.config.retry.run(|_| self.provider.embed_batch(&inputs)) {
                Ok(vectors) => {
                    if vectors.len() != inputs.len() {
                        return Err(EmbedError::ProviderContract(format!(
                            "asked for {} vectors, got {}",
                            inputs.len(),
                            vectors.len()
                        )));
                    }
                    for ((k, _), values) in chunk.iter().zip(vectors) {
                        let v = EmbeddingVector::new(values).map_err(|e| {
                            EmbedError::ProviderContract(format!("invalid vector: {e}"))
                        })?;
                        self.cache.put(k, &v)?;
                        found.insert(k, v);
                    }
                }
                Err(e) => {
                    failed_keys.extend(chunk.iter().map(|(k, _)| *k));
                    last_err = Some(e);
                }
            }
        }
        if let Some(source) = last_err {
            let failed = keys
                .iter()
                .enumerate()
                .filter(|(_, k)| failed_keys.contains(k.as_str()))
                .map(|(i, _)| i)
                .collect();
            return Err(EmbedError::Transport { failed, source });
        }

        let out: Vec<EmbeddingVector> = keys.iter().map(|k| found[k.as_str()].clone()).collect();
        let dims = out[0].dims();
        if let Some(v) = out.iter().find(|v| v.dims() != dims) {
            return Err(EmbedError::ProviderContract(format!(
                "mixed dimensions {dims} and {}",
                v.dims()
            )));
        }
        Ok(out)
    }
}

/// A semantic similarity metric over pairs of texts.
pub trait SimilarityBackend: Send + Sync {
    fn metric_id(&self) -> String;
    fn similarities(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, EmbedError>;
}

/// Cosine of embeddings; the default metric.
pub struct EmbeddingSimilarity {
    embedder: Arc<Embedder>,
}

impl EmbeddingSimilarity {
    pub fn new(embedder: Arc<Embedder>) -> Self {
        Self { embedder }
    }
}

impl SimilarityBackend for EmbeddingSimilarity {
    fn metric_id(&self) -> String {
        format!(
            "cosine:{}:{}",
            self.embedder.provider_id(),
            self.embedder.model_name()
        )
    }

    fn similarities(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, EmbedError> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let texts: Vec<&str> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
        let vectors = self.embedder.embed_texts(&texts)?;
        vectors
            .chunks_exact(2)
            .map(|ab| cosine(&ab[0], &ab[1]))
            .collect()
    }
}

/// Result of one judge-model similarity query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub score: f64,
    /// `b` was placed in the first response slot.
    pub swapped: bool,
    pub raw_reply: String,
}

fn score_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)"?score"?\s*[:=]\s*"?\s*(-?[0-9]+(?:\.[0-9]+)?)"#).unwrap()
    })
}

/// Extracts the `score` field of a judge reply: a JSON object (possibly inside a
/// code fence or surrounding prose), with a number or a numeric string.
pub fn parse_judge_score(reply: &str) -> Option<f64> {
    if let (Some(start), Some(end)) = (reply.find('{'), reply.rfind('}')) {
        if start < end {
            if let Ok(serde_json::Value::Object(obj)) =
                serde_json::from_str::<serde_json::Value>(&reply[start..=end])
            {
                match obj.get("score") {
                    Some(serde_json::Value::Number(n)) => return n.as_f64(),
                    Some(serde_json::Value::String(s)) => {
                        if let Ok(v) = s.trim().parse::<f64>() {
                            return Some(v);
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    score_regex()
        .captures(reply)
        .and_then(|c| c[1].parse::<f64>().ok())
}

/// Asks a judge model to rate the similarity of `a` and `b` in `[0, 1]`.
///
/// The two texts are placed in the prompt in random order (recorded in the
/// result). An unparseable reply is re-asked once; a score outside `[0, 1]` is
/// clamped with a warning.
pub fn judge_similarity(
    a: &str,
    b: &str,
    judge: &dyn TextGenerator,
    template: &PromptTemplate,
    params: &GenerationParams,
    rng: &mut impl Rng,
) -> Result<JudgeScore, EmbedError> {
    template.require_slots(&["response_1", "response_2"])?;
    let swapped = rng.random_bool(0.5);
    let (first, second) = if swapped { (b, a) } else { (a, b) };
    let prompt = template.render(&[("response_1", first), ("response_2", second)])?;
    let mut last = String::new();
    for _ in 0..2 {
        let reply = judge.generate(&prompt, params).map_err(EmbedError::Judge)?;
        if let Some(score) = parse_judge_score(&reply.text) {
            let clamped = score.clamp(0.0, 1.0);
            if clamped != score {
                log::warn!("judge score {score} outside [0, 1]; clamped to {clamped}");
            }
            return Ok(JudgeScore {
                score: clamped,
                swapped,
                raw_reply: reply.text,
            });
        }
        last = reply.text;
    }
    Err(EmbedError::JudgeFormat(last))
}

/// Judge-model metric. Each pair's prompt order comes from a generator seeded by
/// `(seed, a, b)`, so runs reproduce regardless of scheduling.
pub struct JudgeSimilarity {
    judge: Arc<dyn TextGenerator>,
    template: PromptTemplate,
    params: GenerationParams,
    seed: u64,
    log: Mutex<Vec<JudgeScore>>,
}

impl JudgeSimilarity {
    pub fn new(
        judge: Arc<dyn TextGenerator>,
        template: PromptTemplate,
        params: GenerationParams,
        seed: u64,
    ) -> Result<Self, EmbedError> {
        template.require_slots(&["response_1", "response_2"])?;
        Ok(Self {
            judge,
            template,
            params,
            seed,
            log: Mutex::new(Vec::new()),
        })
    }

    /// Every judge call made so far, including the recorded prompt order.
    pub fn audit_log(&self) -> Vec<JudgeScore> {
        self.log.lock().unwrap().clone()
    }

    fn rng_for(&self, a: &str, b: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(content_hash(a).as_bytes());
        h.update(content_hash(b).as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

impl SimilarityBackend for JudgeSimilarity {
    fn metric_id(&self) -> String {
        format!("judge:{}", self.judge.id())
    }

    fn similarities(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, EmbedError> {
        pairs
            .iter()
            .map(|(a, b)| {
                let mut rng = self.rng_for(a, b);
                let s = judge_similarity(
                    a,
                    b,
                    self.judge.as_ref(),
                    &self.template,
                    &self.params,
                    &mut rng,
                )?;
                let score = s.score;
                self.log.lock().unwrap().push(s);
                Ok(score)
            })
            .collect()
    }
}
