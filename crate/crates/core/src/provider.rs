//! Clients for text-generation and embedding providers.
//!
//! Two backends are shipped: an HTTP client for OpenAI-compatible endpoints and a
//! deterministic offline stub. Both sit behind [`TextGenerator`] and
//! [`EmbeddingProvider`] so the pipeline never knows which one it is talking to.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{GenerationParams, ModelRef, ProviderKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    /// Network failure, timeout, rate limit or 5xx; worth retrying.
    #[error("transport error: {0}")]
    Transport(String),
    /// The provider refused the request (4xx other than 429).
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("missing credential: environment variable `{0}` is not set")]
    MissingCredential(String),
    /// The reply did not have the documented shape.
    #[error("unexpected reply: {0}")]
    Protocol(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub text: String,
    /// The provider stopped at the length limit.
    pub truncated: bool,
}

pub trait TextGenerator: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, prompt: &str, params: &GenerationParams)
        -> Result<Generation, ProviderError>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn model_name(&self) -> &str;
    /// One vector per input text, in input order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay_ms: 0,
        }
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// retry budget is spent. Delays double after each attempt.
    pub fn run<T>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    let delay = self.base_delay_ms.saturating_mul(1 << attempt.min(16));
                    log::debug!("attempt {} failed ({e}); retrying in {delay} ms", attempt + 1);
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn api_key(env: Option<&str>) -> Result<Option<String>, ProviderError> {
    match env {
        None => Ok(None),
        Some(var) => std::env::var(var)
            .map(Some)
            .map_err(|_| ProviderError::MissingCredential(var.to_owned())),
    }
}

fn http_client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(300))
        .build()
        .expect("TLS backend initializes")
}

fn classify(status: reqwest::StatusCode, body: String) -> ProviderError {
    if status.as_u16() == 429 || status.is_server_error() {
        ProviderError::Transport(format!("HTTP {status}: {body}"))
    } else {
        ProviderError::Rejected(format!("HTTP {status}: {body}"))
    }
}

fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    key: Option<&str>,
    body: &serde_json::Value,
) -> Result<serde_json::Value, ProviderError> {
    let mut req = client.post(url).json(body);
    if let Some(k) = key {
        req = req.bearer_auth(k);
    }
    let resp = req
        .send()
        .map_err(|e| ProviderError::Transport(e.to_string()))?;
    let status = resp.status();
    if !status.is_success() {
        let text = resp.text().unwrap_or_default();
        return Err(classify(status, text));
    }
    resp.json()
        .map_err(|e| ProviderError::Protocol(e.to_string()))
}

/// Chat-completions client for OpenAI-compatible servers (OpenAI, vLLM, ...).
pub struct OpenAiChat {
    id: String,
    model: String,
    url: String,
    key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiChat {
    pub fn new(
        id: impl Into<String>,
        endpoint: &str,
        model: impl Into<String>,
        api_key_env: Option<&str>,
    ) -> Result<Self, ProviderError> {
        Ok(Self {
            id: id.into(),
            model: model.into(),
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            key: api_key(api_key_env)?,
            client: http_client(),
        })
    }
}

impl TextGenerator for OpenAiChat {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<Generation, ProviderError> {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_length,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        let reply = post_json(&self.client, &self.url, self.key.as_deref(), &body)?;
        let choice = &reply["choices"][0];
        let text = choice["message"]["content"]
            .as_str()
            .ok_or_else(|| ProviderError::Protocol("missing choices[0].message.content".into()))?;
        Ok(Generation {
            text: text.to_owned(),
            truncated: choice["finish_reason"].as_str() == Some("length"),
        })
    }
}

/// Embeddings client for OpenAI-compatible `/embeddings` endpoints.
pub struct OpenAiEmbeddings {
    provider_id: String,
    model: String,
    url: String,
    key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiEmbeddings {
    pub fn new(
        endpoint: &str,
        model: impl Into<String>,
        api_key_env: Option<&str>,
    ) -> Result<Self, ProviderError> {
        let endpoint = endpoint.trim_end_matches('/');
        Ok(Self {
            provider_id: format!("openai-compatible:{endpoint}"),
            model: model.into(),
            url: format!("{endpoint}/embeddings"),
            key: api_key(api_key_env)?,
            client: http_client(),
        })
    }
}

impl EmbeddingProvider for OpenAiEmbeddings {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn model_name(&self) -> &str {
        &self.model
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let body = json!({ "model": self.model, "input": texts });
        let reply = post_json(&self.client, &self.url, self.key.as_deref(), &body)?;

        #[derive(Deserialize)]
        struct Item {
            index: usize,
            embedding: Vec<f64>,
        }
        let mut items: Vec<Item> = serde_json::from_value(reply["data"].clone())
            .map_err(|e| ProviderError::Protocol(format!("embedding data: {e}")))?;
        items.sort_by_key(|i| i.index);
        Ok(items.into_iter().map(|i| i.embedding).collect())
    }
}

fn seeded_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

const STUB_VOCAB: &[&str] = &[
    "analysis", "answer", "approach", "balance", "careful", "clear", "code", "concept", "context",
    "data", "detail", "direct", "efficient", "energy", "example", "explain", "fact", "formula",
    "function", "general", "history", "idea", "important", "insight", "language", "logic",
    "method", "model", "number", "object", "option", "pattern", "physics", "poem", "practical",
    "precise", "problem", "process", "question", "reason", "result", "rhythm", "science",
    "simple", "solution", "step", "story", "structure", "summary", "system", "theory", "value",
    "variable", "vivid", "word", "write",
];

/// Offline generator: output is a pure function of `(id, prompt, params.seed)`.
///
/// Prompts that ask for a JSON reply get a JSON object carrying the fields the
/// bundled evolution templates expect, so pool building works end to end.
pub struct StubGenerator {
    id: String,
    calls: AtomicUsize,
}

impl StubGenerator {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn words(rng: &mut ChaCha8Rng, prompt_words: &[&str], n: usize) -> String {
        (0..n)
            .map(|_| {
                if !prompt_words.is_empty() && rng.random_bool(0.3) {
                    *prompt_words.choose(rng).unwrap()
                } else {
                    *STUB_VOCAB.choose(rng).unwrap()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Debug for StubGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StubGenerator").field("id", &self.id).finish()
    }
}

impl TextGenerator for StubGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<Generation, ProviderError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let seed = params.seed.map(u64::to_le_bytes).unwrap_or_default();
        let mut rng = seeded_rng(&[self.id.as_bytes(), prompt.as_bytes(), &seed]);
        let prompt_words: Vec<&str> = prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| w.len() > 3)
            .collect();
        if prompt.contains("JSON") {
            let new_prompt = format!(
                "{} the {} of {}?",
                ["Explain", "Describe", "Compute", "Compare"].choose(&mut rng).unwrap(),
                Self::words(&mut rng, &prompt_words, 3),
                Self::words(&mut rng, &prompt_words, 4),
            );
            let answer = Self::words(&mut rng, &prompt_words, 12);
            let reply = json!({ "new_prompt": new_prompt, "question": new_prompt, "answer": answer });
            return Ok(Generation {
                text: reply.to_string(),
                truncated: false,
            });
        }
        let n = rng.random_range(20..60usize);
        let budget = params.max_length as usize;
        let truncated = n > budget;
        Ok(Generation {
            text: Self::words(&mut rng, &prompt_words, n.min(budget.max(1))),
            truncated,
        })
    }
}

type GenerateFn = dyn Fn(&str) -> Result<String, ProviderError> + Send + Sync;

/// Generator backed by a closure; handy for scripted replies.
pub struct FnGenerator {
    id: String,
    f: Box<GenerateFn>,
    calls: AtomicUsize,
}

impl FnGenerator {
    pub fn new(
        id: impl Into<String>,
        f: impl Fn(&str) -> Result<String, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            id: id.into(),
            f: Box::new(f),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl TextGenerator for FnGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, prompt: &str, _: &GenerationParams) -> Result<Generation, ProviderError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        (self.f)(prompt).map(|text| Generation {
            text,
            truncated: false,
        })
    }
}

/// Feature-hashing bag-of-words embedder. Deterministic and offline; texts that
/// share words get similar vectors.
pub struct HashingEmbedder {
    dims: usize,
    model: String,
}

impl HashingEmbedder {
    pub fn new(dims: usize) -> Self {
        assert!(dims > 0, "dims must be positive");
        Self {
            dims,
            model: format!("hashing-{dims}"),
        }
    }

    fn bucket(&self, token: &str) -> (usize, f64) {
        let d = Sha256::digest(token.as_bytes());
        let idx = u64::from_le_bytes(d[..8].try_into().unwrap()) as usize % self.dims;
        let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        (idx, sign)
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dims];
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        for t in &tokens {
            let (i, s) = self.bucket(t);
            v[i] += s;
        }
        for w in tokens.windows(2) {
            let (i, s) = self.bucket(&format!("{} {}", w[0], w[1]));
            v[i] += 0.5 * s;
        }
        // Whole-text feature keeps punctuation-only input away from the zero vector.
        let (i, s) = self.bucket(&format!("\u{1f}{lower}"));
        v[i] += 0.25 * s;
        v
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn provider_id(&self) -> &str {
        "hashing"
    }

    fn model_name(&self) -> &str {
        &self.model
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Builds the generator for a configured model.
pub fn generator_for(model: &ModelRef) -> Result<Box<dyn TextGenerator>, ProviderError> {
    match model.provider {
        ProviderKind::Stub => Ok(Box::new(StubGenerator::new(model.id.as_str()))),
        ProviderKind::OpenaiCompatible => {
            let endpoint = model.endpoint.as_deref().unwrap_or("https://api.openai.com/v1");
            Ok(Box::new(OpenAiChat::new(
                model.id.as_str(),
                endpoint,
                model.remote_model_name(),
                model.api_key_env.as_deref(),
            )?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retry_stops_on_success() {
        let policy = RetryPolicy {
            max_retries: 3,
            base_delay_ms: 0,
        };
        let n = Cell::new(0);
        let r = policy.run(|_| {
            n.set(n.get() + 1);
            if n.get() < 3 {
                Err(ProviderError::Transport("flaky".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(r, Ok(7));
        assert_eq!(n.get(), 3);
    }

    #[test]
    fn retry_budget_and_non_retryable() {
        let policy = RetryPolicy {
            max_retries: 2,
            base_delay_ms: 0,
        };
        let n = Cell::new(0);
        let r: Result<(), _> = policy.run(|_| {
            n.set(n.get() + 1);
            Err(ProviderError::Transport("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(n.get(), 3);

        n.set(0);
        let r: Result<(), _> = policy.run(|_| {
            n.set(n.get() + 1);
            Err(ProviderError::Rejected("bad request".into()))
        });
        assert!(r.is_err());
        assert_eq!(n.get(), 1);
    }

    #[test]
    fn stub_generator_is_deterministic() {
        let g = StubGenerator::new("m1");
        let p = GenerationParams::default();
        let a = g.generate("Write a poem about rain", &p).unwrap();
        let b = g.generate("Write a poem about rain", &p).unwrap();
        assert_eq!(a, b);
        let other = StubGenerator::new("m2").generate("Write a poem about rain", &p).unwrap();
        assert_ne!(a.text, other.text);
        assert_eq!(g.calls(), 2);
    }

    #[test]
    fn stub_generator_emits_json_when_asked() {
        let g = StubGenerator::new("gen");
        let out = g
            .generate("Output the response in JSON. {instruction}", &GenerationParams::default())
            .unwrap();
        let v: serde_json::Value = serde_json::from_str(&out.text).unwrap();
        assert!(v["new_prompt"].is_string());
        assert!(v["answer"].is_string());
    }

    #[test]
    fn hashing_embedder_similar_texts_are_closer() {
        let e = HashingEmbedder::default();
        let a = e.embed_one("write a short poem about the sea");
        let b = e.embed_one("write a short poem about the ocean");
        let c = e.embed_one("compute the derivative of x squared");
        let cos = |x: &[f64], y: &[f64]| {
            let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            d / (x.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        assert!(cos(&a, &b) > cos(&a, &c));
        assert!(e.embed_one("!!!").iter().any(|v| *v != 0.0));
    }

    #[test]
    fn missing_credential_is_reported() {
        let err = OpenAiChat::new("m", "http://localhost:1", "x", Some("MADEVAL_TEST_UNSET_KEY"))
            .err()
            .unwrap();
        assert_eq!(err, ProviderError::MissingCredential("MADEVAL_TEST_UNSET_KEY".into()));
    }
}
