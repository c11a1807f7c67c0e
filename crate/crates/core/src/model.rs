//! Domain types shared by every stage of a competition.
//!
//! Everything here is an immutable value object. Identifiers compare byte-wise,
//! which gives the fixed total order used to canonicalize model pairs.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid pair: both sides are `{0}`")]
    InvalidPair(ModelId),
    #[error("presented model `{presented}` is not part of pair {pair}")]
    InconsistentSide { presented: ModelId, pair: PairKey },
    #[error("outcome must be one of 0, 0.5, 1 (got {0})")]
    InvalidOutcome(f64),
    #[error("instruction text must not be empty")]
    EmptyText,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Identifier of a competing model. Ordering is plain byte-wise comparison.
    ModelId
);
string_id!(
    /// Content-derived identifier of an instruction.
    InstructionId
);

/// Hex SHA-256 of `text`, used for cache keys and response embedding keys.
pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl InstructionId {
    /// Content hash of `(scenario, text)`: 16 hex digits of SHA-256.
    pub fn from_content(scenario: &Scenario, text: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(scenario.as_str().as_bytes());
        hasher.update([0x1f]);
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        Self(hex::encode(&digest[..8]))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Scenario {
    Understanding,
    Reasoning,
    Writing,
    Coding,
    Custom(String),
}

impl Scenario {
    pub fn as_str(&self) -> &str {
        match self {
            Scenario::Understanding => "understanding",
            Scenario::Reasoning => "reasoning",
            Scenario::Writing => "writing",
            Scenario::Coding => "coding",
            Scenario::Custom(s) => s,
        }
    }
}

impl From<String> for Scenario {
    fn from(s: String) -> Self {
        match s.as_str() {
            "understanding" => Scenario::Understanding,
            "reasoning" => Scenario::Reasoning,
            "writing" => Scenario::Writing,
            "coding" => Scenario::Coding,
            _ => Scenario::Custom(s),
        }
    }
}

impl From<&str> for Scenario {
    fn from(s: &str) -> Self {
        Scenario::from(s.to_owned())
    }
}

impl From<Scenario> for String {
    fn from(s: Scenario) -> Self {
        s.as_str().to_owned()
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: InstructionId,
    pub scenario: Scenario,
    pub text: String,
    /// Ancestors from the seed down to the direct parent.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lineage: Vec<InstructionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<ModelId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
}

impl Instruction {
    /// A seed instruction with a content-hash id and no lineage.
    pub fn seed(scenario: Scenario, text: impl Into<String>) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::EmptyText);
        }
        Ok(Self {
            id: InstructionId::from_content(&scenario, &text),
            scenario,
            text,
            lineage: Vec::new(),
            generator: None,
            reference_answer: None,
        })
    }

    pub fn with_reference_answer(mut self, answer: Option<String>) -> Self {
        self.reference_answer = answer.filter(|a| !a.trim().is_empty());
        self
    }

    /// Number of ancestors; seeds have depth 0.
    pub fn depth(&self) -> usize {
        self.lineage.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    /// Any endpoint speaking the OpenAI chat-completions / embeddings wire format.
    #[default]
    OpenaiCompatible,
    /// Offline deterministic generator, for smoke runs and tests.
    Stub,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_length: u32,
    /// Sampling seed forwarded to providers that support one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 1.0,
            max_length: 2048,
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ModelError::InvalidConfig(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if self.max_length == 0 {
            return Err(ModelError::InvalidConfig("max_length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub id: ModelId,
    #[serde(default)]
    pub display_name: String,
    #[serde(default)]
    pub provider: ProviderKind,
    /// Endpoint base URL for HTTP providers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Model name sent to the provider; defaults to the id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub generation_params: GenerationParams,
}

impl ModelRef {
    pub fn stub(id: impl Into<String>) -> Self {
        let id = ModelId::new(id);
        Self {
            display_name: id.to_string(),
            id,
            provider: ProviderKind::Stub,
            endpoint: None,
            model_name: None,
            api_key_env: None,
            generation_params: GenerationParams::default(),
        }
    }

    pub fn remote_model_name(&self) -> &str {
        self.model_name.as_deref().unwrap_or(self.id.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseStatus {
    Ok,
    Failed,
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub instruction_id: InstructionId,
    pub model_id: ModelId,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_key: Option<String>,
    pub status: ResponseStatus,
    #[serde(default)]
    pub latency_ms: u64,
}

impl Response {
    /// Usable for judging: generated and non-empty.
    pub fn is_usable(&self) -> bool {
        matches!(self.status, ResponseStatus::Ok | ResponseStatus::Truncated)
            && !self.text.trim().is_empty()
    }
}

/// An unordered pair of models in canonical form (`model_a < model_b`).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPair")]
pub struct PairKey {
    model_a: ModelId,
    model_b: ModelId,
}

#[derive(Deserialize)]
struct RawPair {
    model_a: ModelId,
    model_b: ModelId,
}

impl TryFrom<RawPair> for PairKey {
    type Error = ModelError;

    fn try_from(raw: RawPair) -> Result<Self, Self::Error> {
        let key = canonical_pair(&raw.model_a, &raw.model_b)?;
        if key.model_a != raw.model_a {
            return Err(ModelError::InvalidConfig(format!(
                "pair ({}, {}) is not in canonical order",
                raw.model_a, raw.model_b
            )));
        }
        Ok(key)
    }
}

impl PairKey {
    pub fn model_a(&self) -> &ModelId {
        &self.model_a
    }

    pub fn model_b(&self) -> &ModelId {
        &self.model_b
    }

    pub fn contains(&self, id: &ModelId) -> bool {
        &self.model_a == id || &self.model_b == id
    }

    /// The member of the pair that is not `id`.
    pub fn other(&self, id: &ModelId) -> Option<&ModelId> {
        if &self.model_a == id {
            Some(&self.model_b)
        } else if &self.model_b == id {
            Some(&self.model_a)
        } else {
            None
        }
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} vs {}", self.model_a, self.model_b)
    }
}

pub fn canonical_pair(m1: &ModelId, m2: &ModelId) -> Result<PairKey, ModelError> {
    match m1.cmp(m2) {
        std::cmp::Ordering::Less => Ok(PairKey {
            model_a: m1.clone(),
            model_b: m2.clone(),
        }),
        std::cmp::Ordering::Greater => Ok(PairKey {
            model_a: m2.clone(),
            model_b: m1.clone(),
        }),
        std::cmp::Ordering::Equal => Err(ModelError::InvalidPair(m1.clone())),
    }
}

/// Every unordered pair over `models`, in the nested `i < j` order of the input.
pub fn all_pairs(models: &[ModelId]) -> Result<Vec<PairKey>, ModelError> {
    let mut pairs = Vec::with_capacity(models.len() * models.len().saturating_sub(1) / 2);
    for (i, a) in models.iter().enumerate() {
        for b in &models[i + 1..] {
            pairs.push(canonical_pair(a, b)?);
        }
    }
    Ok(pairs)
}

/// The annotator's raw 3-AFC answer, relative to screen position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
    Tie,
}

/// Canonical-orientation outcome: 1 means `model_a` won, 0 means `model_b` won.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Outcome(f64);

impl Outcome {
    pub const A_WINS: Outcome = Outcome(1.0);
    pub const TIE: Outcome = Outcome(0.5);
    pub const B_WINS: Outcome = Outcome(0.0);

    pub fn value(self) -> f64 {
        self.0
    }

    /// The same result seen from `model_b`'s side.
    pub fn flipped(self) -> Outcome {
        Outcome(1.0 - self.0)
    }
}

impl TryFrom<f64> for Outcome {
    type Error = ModelError;

    fn try_from(w: f64) -> Result<Self, Self::Error> {
        if w == 0.0 || w == 0.5 || w == 1.0 {
            Ok(Outcome(w))
        } else {
            Err(ModelError::InvalidOutcome(w))
        }
    }
}

impl From<Outcome> for f64 {
    fn from(o: Outcome) -> f64 {
        o.0
    }
}

/// Map a positional choice back to the canonical orientation of `pair`.
pub fn encode_outcome(
    choice: Choice,
    presented_left: &ModelId,
    pair: &PairKey,
) -> Result<Outcome, ModelError> {
    if !pair.contains(presented_left) {
        return Err(ModelError::InconsistentSide {
            presented: presented_left.clone(),
            pair: pair.clone(),
        });
    }
    let a_on_left = presented_left == pair.model_a();
    Ok(match (choice, a_on_left) {
        (Choice::Tie, _) => Outcome::TIE,
        (Choice::Left, true) | (Choice::Right, false) => Outcome::A_WINS,
        (Choice::Left, false) | (Choice::Right, true) => Outcome::B_WINS,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub pair: PairKey,
    pub instruction_id: InstructionId,
    pub annotator_id: String,
    pub outcome: Outcome,
    pub presented_left: ModelId,
    pub submitted_at: DateTime<Utc>,
}

impl Judgment {
    /// Score from the perspective of `model`, if it took part.
    pub fn score_for(&self, model: &ModelId) -> Option<f64> {
        if model == self.pair.model_a() {
            Some(self.outcome.value())
        } else if model == self.pair.model_b() {
            Some(self.outcome.flipped().value())
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EloConfig {
    /// K-factor: largest possible adjustment per comparison.
    pub eta: f64,
    /// Rating-difference scale of the logistic expected score.
    pub tau: f64,
    /// Initial rating of every model.
    pub s0: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for EloConfig {
    fn default() -> Self {
        Self {
            eta: 4.0,
            tau: 400.0,
            s0: 1000.0,
            replicates: 1000,
            seed: 0,
        }
    }
}

impl EloConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(ModelError::InvalidConfig(format!("eta must be > 0 (got {})", self.eta)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ModelError::InvalidConfig(format!("tau must be > 0 (got {})", self.tau)));
        }
        if !self.s0.is_finite() {
            return Err(ModelError::InvalidConfig("s0 must be finite".into()));
        }
        if self.replicates == 0 {
            return Err(ModelError::InvalidConfig("replicates must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRow {
    pub model: ModelId,
    pub mean_rating: f64,
    pub rating_std: f64,
    pub rank: usize,
}

/// Global ranking: rows sorted by rank (1 = best).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingTable {
    pub rows: Vec<RatingRow>,
}

impl RatingTable {
    /// Ranks models by descending mean rating, breaking ties by id.
    pub fn from_ratings(ratings: impl IntoIterator<Item = (ModelId, f64, f64)>) -> Self {
        let mut rows: Vec<RatingRow> = ratings
            .into_iter()
            .map(|(model, mean_rating, rating_std)| RatingRow {
                model,
                mean_rating,
                rating_std,
                rank: 0,
            })
            .collect();
        rows.sort_by(|a, b| {
            b.mean_rating
                .total_cmp(&a.mean_rating)
                .then_with(|| a.model.cmp(&b.model))
        });
        for (i, row) in rows.iter_mut().enumerate() {
            row.rank = i + 1;
        }
        Self { rows }
    }

    pub fn rank_of(&self, model: &ModelId) -> Option<usize> {
        self.rows.iter().find(|r| &r.model == model).map(|r| r.rank)
    }

    /// Model ids from best to worst.
    pub fn order(&self) -> Vec<ModelId> {
        self.rows.iter().map(|r| r.model.clone()).collect()
    }

    /// Ranks of `models`, in the given model order.
    pub fn ranks_for(&self, models: &[ModelId]) -> Option<Vec<usize>> {
        models.iter().map(|m| self.rank_of(m)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(s: &str) -> ModelId {
        ModelId::from(s)
    }

    #[test]
    fn canonical_pair_orders_ids() {
        let k = canonical_pair(&id("gpt4"), &id("vicuna")).unwrap();
        assert_eq!(k.model_a().as_str(), "gpt4");
        assert_eq!(k.model_b().as_str(), "vicuna");
        assert_eq!(canonical_pair(&id("vicuna"), &id("gpt4")).unwrap(), k);
    }

    #[test]
    fn canonical_pair_rejects_identical_ids() {
        assert_eq!(
            canonical_pair(&id("m1"), &id("m1")),
            Err(ModelError::InvalidPair(id("m1")))
        );
    }

    #[test]
    fn byte_order_not_locale_order() {
        // 'Z' (0x5a) sorts before 'a' (0x61).
        let k = canonical_pair(&id("alpha"), &id("Zeta")).unwrap();
        assert_eq!(k.model_a().as_str(), "Zeta");
    }

    #[test]
    fn encode_outcome_examples() {
        let pair = canonical_pair(&id("a"), &id("b")).unwrap();
        assert_eq!(encode_outcome(Choice::Left, &id("a"), &pair).unwrap(), Outcome::A_WINS);
        assert_eq!(encode_outcome(Choice::Left, &id("b"), &pair).unwrap(), Outcome::B_WINS);
        assert_eq!(encode_outcome(Choice::Tie, &id("a"), &pair).unwrap(), Outcome::TIE);
        assert_eq!(encode_outcome(Choice::Tie, &id("b"), &pair).unwrap(), Outcome::TIE);
        assert_eq!(encode_outcome(Choice::Right, &id("b"), &pair).unwrap(), Outcome::A_WINS);
        assert!(matches!(
            encode_outcome(Choice::Left, &id("c"), &pair),
            Err(ModelError::InconsistentSide { .. })
        ));
    }

    #[test]
    fn outcome_rejects_other_values() {
        assert!(Outcome::try_from(0.25).is_err());
        assert!(serde_json::from_str::<Outcome>("0.7").is_err());
        assert_eq!(serde_json::from_str::<Outcome>("0.5").unwrap(), Outcome::TIE);
    }

    #[test]
    fn pair_key_rejects_non_canonical_json() {
        let bad = r#"{"model_a":"z","model_b":"a"}"#;
        assert!(serde_json::from_str::<PairKey>(bad).is_err());
        let same = r#"{"model_a":"a","model_b":"a"}"#;
        assert!(serde_json::from_str::<PairKey>(same).is_err());
    }

    #[test]
    fn instruction_ids_are_content_hashes() {
        let a = Instruction::seed(Scenario::Writing, "Write a poem").unwrap();
        let b = Instruction::seed(Scenario::Writing, "Write a poem").unwrap();
        let c = Instruction::seed(Scenario::Coding, "Write a poem").unwrap();
        assert_eq!(a.id, b.id);
        assert_ne!(a.id, c.id);
        assert_eq!(a.id.as_str().len(), 16);
        assert_eq!(Instruction::seed(Scenario::Writing, "  "), Err(ModelError::EmptyText));
    }

    #[test]
    fn scenario_round_trips_custom_tags() {
        let s: Scenario = serde_json::from_str("\"legal\"").unwrap();
        assert_eq!(s, Scenario::Custom("legal".into()));
        assert_eq!(serde_json::to_string(&Scenario::Coding).unwrap(), "\"coding\"");
    }

    #[test]
    fn all_pairs_counts() {
        let models: Vec<ModelId> = (0..8).map(|i| ModelId::new(format!("m{i}"))).collect();
        assert_eq!(all_pairs(&models).unwrap().len(), 28);
    }

    #[test]
    fn rating_table_ties_broken_by_id() {
        let t = RatingTable::from_ratings(vec![
            (id("b"), 1000.0, 0.0),
            (id("a"), 1000.0, 0.0),
            (id("c"), 1010.0, 0.0),
        ]);
        assert_eq!(t.order(), vec![id("c"), id("a"), id("b")]);
        assert_eq!(t.ranks_for(&[id("a"), id("b"), id("c")]), Some(vec![2, 3, 1]));
    }

    fn choice() -> impl Strategy<Value = Choice> {
        prop_oneof![Just(Choice::Left), Just(Choice::Right), Just(Choice::Tie)]
    }

    proptest! {
        #[test]
        fn canonical_pair_symmetric_and_idempotent(a in "[a-zA-Z0-9_-]{1,8}", b in "[a-zA-Z0-9_-]{1,8}") {
            prop_assume!(a != b);
            let k1 = canonical_pair(&id(&a), &id(&b)).unwrap();
            let k2 = canonical_pair(&id(&b), &id(&a)).unwrap();
            prop_assert_eq!(&k1, &k2);
            prop_assert!(k1.model_a() < k1.model_b());
            let again = canonical_pair(k1.model_a(), k1.model_b()).unwrap();
            prop_assert_eq!(again, k1);
        }

        #[test]
        fn side_flip_inverts_outcome(c in choice()) {
            let pair = canonical_pair(&id("x"), &id("y")).unwrap();
            let w_a = encode_outcome(c, &id("x"), &pair).unwrap();
            let w_b = encode_outcome(c, &id("y"), &pair).unwrap();
            prop_assert_eq!(w_b.value(), 1.0 - w_a.value());
        }

        #[test]
        fn judgment_round_trips_bit_exactly(
            c in choice(),
            left_is_a in any::<bool>(),
            annotator in "[ -~]{0,12}",
            secs in 0i64..4_000_000_000,
            nanos in 0u32..1_000_000_000,
        ) {
            let pair = canonical_pair(&id("m-a"), &id("m-b")).unwrap();
            let left = if left_is_a { id("m-a") } else { id("m-b") };
            let j = Judgment {
                outcome: encode_outcome(c, &left, &pair).unwrap(),
                pair,
                instruction_id: InstructionId::new("0123456789abcdef"),
                annotator_id: annotator,
                presented_left: left,
                submitted_at: DateTime::from_timestamp(secs, nanos).unwrap(),
            };
            let line = serde_json::to_string(&j).unwrap();
            let back: Judgment = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(&back, &j);
            prop_assert_eq!(serde_json::to_string(&back).unwrap(), line);
        }
    }
}
