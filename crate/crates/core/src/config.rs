//! Competition configuration file (TOML).
//!
//! ```toml
//! seed = 7
//! pool = "pool.jsonl"
//!
//! [selection]
//! k = 10
//! lambda = 1.0
//!
//! [elo]
//! replicates = 1000
//!
//! [embedding]
//! provider = "openai"            # or "hashing" for offline runs
//! endpoint = "https://api.openai.com/v1"
//! model = "text-embedding-ada-002"
//! api_key_env = "OPENAI_API_KEY"
//!
//! [[models]]
//! id = "model-x"
//! endpoint = "http://localhost:8000/v1"
//! generation_params = { max_length = 1024 }
//! ```
//!
//! Credentials are never stored here, only the names of environment variables.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::LeaseConfig;
use crate::embed::{EmbedError, EmbeddingCache, Embedder, EmbedderConfig};
use crate::model::{EloConfig, ModelError, ModelId, ModelRef};
use crate::provider::{EmbeddingProvider, HashingEmbedder, OpenAiEmbeddings, ProviderError, RetryPolicy};
use crate::selector::SelectionParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingProviderKind {
    Openai,
    #[default]
    Hashing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub provider: EmbeddingProviderKind,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: Option<String>,
    /// Vector size of the offline hashing embedder.
    pub dims: usize,
    pub batch_size: usize,
    pub retry: RetryPolicy,
    /// On-disk cache; relative paths resolve against the state directory.
    pub cache_dir: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: EmbeddingProviderKind::Hashing,
            endpoint: "https://api.openai.com/v1".into(),
            model: "text-embedding-ada-002".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            dims: 256,
            batch_size: 64,
            retry: RetryPolicy::default(),
            cache_dir: None,
        }
    }
}

impl EmbeddingConfig {
    pub fn provider(&self) -> Result<Arc<dyn EmbeddingProvider>, ConfigError> {
        Ok(match self.provider {
            EmbeddingProviderKind::Hashing => {
                if self.dims == 0 {
                    return Err(ConfigError::Invalid("embedding.dims must be positive".into()));
                }
                Arc::new(HashingEmbedder::new(self.dims))
            }
            EmbeddingProviderKind::Openai => Arc::new(OpenAiEmbeddings::new(
                &self.endpoint,
                self.model.clone(),
                self.api_key_env.as_deref(),
            )?),
        })
    }

    pub fn embedder(
        &self,
        provider: Arc<dyn EmbeddingProvider>,
        state_dir: &Path,
    ) -> Result<Embedder, ConfigError> {
        let cache = match &self.cache_dir {
            Some(dir) => EmbeddingCache::on_disk(state_dir.join(dir)).map_err(|e| ConfigError::Read {
                path: dir.clone(),
                source: e,
            })?,
            None => EmbeddingCache::in_memory(),
        };
        Ok(Embedder::new(
            provider,
            cache,
            EmbedderConfig {
                batch_size: self.batch_size,
                retry: self.retry.clone(),
            },
        ))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    #[default]
    Embedding,
    Judge,
}

/// Response-similarity metric. Diversity between instructions always uses
/// the embedding backend.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityConfig {
    pub metric: MetricKind,
    pub judge: Option<ModelRef>,
    /// Judge prompt with `{response_1}` and `{response_2}` slots.
    pub judge_template: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResponseConfig {
    pub concurrency: usize,
    pub retry: RetryPolicy,
    /// Abort when a model fails on more than this share of the pool.
    pub max_failure_fraction: f64,
}

impl Default for ResponseConfig {
    fn default() -> Self {
        Self {
            concurrency: 8,
            retry: RetryPolicy::default(),
            max_failure_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationConfig {
    #[serde(flatten)]
    pub lease: LeaseConfig,
    /// Seed of the per-task left/right coin.
    pub side_seed: u64,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    /// Latent Elo-scale skill per model id.
    pub skills: BTreeMap<ModelId, f64>,
    pub tie_width: f64,
    /// Number of simulated annotators working through the queue.
    pub annotators: usize,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            skills: BTreeMap::new(),
            tie_width: 0.0,
            annotators: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// Re-rate with each pair's first `k'` picks for `k' = 1..=k`.
    pub k_sweep: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { k_sweep: true }
    }
}

/// A model entry; `deferred` models are left out of the initial competition
/// and can be added later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    #[serde(flatten)]
    pub model: ModelRef,
    #[serde(default)]
    pub deferred: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompetitionConfig {
    pub seed: u64,
    /// Instruction pool file; relative paths resolve against the config file.
    pub pool: Option<PathBuf>,
    pub selection: SelectionParams,
    pub elo: EloConfig,
    pub embedding: EmbeddingConfig,
    pub similarity: SimilarityConfig,
    pub responses: ResponseConfig,
    pub annotation: AnnotationConfig,
    pub simulation: SimulationConfig,
    pub report: ReportConfig,
    pub models: Vec<ModelEntry>,
}

impl CompetitionConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            source: Box::new(e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, resolving `pool` relative to it.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::from_toml(&text, path)?;
        if let (Some(pool), Some(dir)) = (&cfg.pool, path.parent()) {
            if pool.is_relative() {
                cfg.pool = Some(dir.join(pool));
            }
        }
        if let (Some(t), Some(dir)) = (&cfg.similarity.judge_template, path.parent()) {
            if t.is_relative() {
                cfg.similarity.judge_template = Some(dir.join(t));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.elo.validate()?;
        if self.selection.k == 0 {
            return Err(ConfigError::Invalid("selection.k must be >= 1".into()));
        }
        if !(self.selection.lambda.is_finite() && self.selection.lambda >= 0.0) {
            return Err(ConfigError::Invalid("selection.lambda must be >= 0".into()));
        }
        let mut seen = HashSet::new();
        for m in &self.models {
            if !seen.insert(&m.model.id) {
                return Err(ConfigError::Invalid(format!("duplicate model id `{}`", m.model.id)));
            }
            m.model.generation_params.validate()?;
        }
        if self.annotation.lease.lease_secs <= 0 || self.annotation.lease.judgments_required == 0 {
            return Err(ConfigError::Invalid(
                "annotation.lease_secs and annotation.judgments_required must be positive".into(),
            ));
        }
        if self.similarity.metric == MetricKind::Judge && self.similarity.judge.is_none() {
            return Err(ConfigError::Invalid("similarity.metric = \"judge\" needs [similarity.judge]".into()));
        }
        if !(0.0..=1.0).contains(&self.responses.max_failure_fraction) {
            return Err(ConfigError::Invalid("responses.max_failure_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn model(&self, id: &ModelId) -> Option<&ModelRef> {
        self.models.iter().map(|m| &m.model).find(|m| &m.id == id)
    }

    /// Models that take part from the start.
    pub fn initial_models(&self) -> Vec<ModelId> {
        self.models
            .iter()
            .filter(|m| !m.deferred)
            .map(|m| m.model.id.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProviderKind;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = CompetitionConfig::from_toml("", Path::new("x")).unwrap();
        assert_eq!(cfg.selection.k, 10);
        assert_eq!(cfg.selection.lambda, 1.0);
        assert_eq!((cfg.elo.eta, cfg.elo.tau, cfg.elo.s0, cfg.elo.replicates), (4.0, 400.0, 1000.0, 1000));
        assert_eq!(cfg.annotation.lease.judgments_required, 1);
        assert_eq!(cfg.embedding.batch_size, 64);
    }

    #[test]
    fn full_config_parses() {
        let text = r#"
            seed = 3
            pool = "pool.jsonl"
            [selection]
            k = 8
            lambda = 0.5
            aggregation = "mean"
            [[selection.k_override]]
            a = "m1"
            b = "m2"
            k = 4
            [annotation]
            lease_secs = 60
            judgments_required = 3
            side_seed = 9
            [simulation]
            skills = { m1 = 1200.0, m2 = 1000.0 }
            annotators = 3
            [[models]]
            id = "m1"
            provider = "stub"
            [[models]]
            id = "m2"
            endpoint = "http://localhost:8000/v1"
            api_key_env = "LOCAL_KEY"
            generation_params = { max_length = 1024 }
            [[models]]
            id = "m3"
            provider = "stub"
            deferred = true
        "#;
        let cfg = CompetitionConfig::from_toml(text, Path::new("x")).unwrap();
        assert_eq!(cfg.selection.k_overrides.len(), 1);
        assert_eq!(cfg.annotation.lease.judgments_required, 3);
        assert_eq!(cfg.annotation.side_seed, 9);
        let m2 = cfg.model(&ModelId::from("m2")).unwrap();
        assert_eq!(m2.provider, ProviderKind::OpenaiCompatible);
        assert_eq!(m2.generation_params.max_length, 1024);
        assert_eq!(m2.generation_params.temperature, 0.7);
        assert_eq!(cfg.initial_models(), vec![ModelId::from("m1"), ModelId::from("m2")]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            "[selection]\nk = 0",
            "[elo]\neta = -1.0",
            "[[models]]\nid = \"a\"\n[[models]]\nid = \"a\"",
            "[[models]]\nid = \"a\"\ngeneration_params = { top_p = 2.0 }",
            "[similarity]\nmetric = \"judge\"",
            "unknown_field_is_fine = 1\n[selection]\nlambda = -0.1",
        ] {
            assert!(CompetitionConfig::from_toml(bad, Path::new("x")).is_err(), "{bad}");
        }
    }
}
