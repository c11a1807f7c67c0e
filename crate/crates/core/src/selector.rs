//! Maximum-discrepancy instruction selection.
//!
//! For a pair of models, instructions are picked greedily: the first pick has the
//! lowest similarity between the two models' responses, and every later pick
//! minimizes
//!
//! ```text
//! M(response_a(x), response_b(x)) + lambda * M(x, I)
//! ```
//!
//! where `I` is the set already picked and `M(x, I)` aggregates the similarity of
//! candidate `x` to the members of `I` (max by default, mean optionally).
//! `M(x, {})` is 0, so `lambda = 0` reduces to taking the K least similar pairs.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{cosine, EmbedError, EmbeddingVector, SimilarityBackend};
use crate::model::{all_pairs, canonical_pair, InstructionId, ModelError, ModelId, PairKey};
use crate::store::ResponseStore;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("pair {0}: no instruction has a usable response from both models")]
    EmptyCandidates(PairKey),
    #[error("k must be >= 1")]
    ZeroK,
    #[error("lambda must be finite and >= 0 (got {0})")]
    InvalidLambda(f64),
    #[error("no embedding for instruction {0}")]
    MissingEmbedding(InstructionId),
    #[error("model `{0}` is already part of the competition")]
    DuplicateModel(ModelId),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("similarity backend: {0}")]
    Similarity(#[from] EmbedError),
}

/// How `M(x, I)` combines per-member similarities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetAggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Mad,
    Random,
}

/// One selected instruction. Score fields are `None` for random selections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pick {
    pub instruction_id: InstructionId,
    pub response_similarity: Option<f64>,
    pub diversity_penalty: Option<f64>,
    pub objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub pair: PairKey,
    pub strategy: Strategy,
    pub picks: Vec<Pick>,
    pub k: usize,
    pub lambda: Option<f64>,
    pub metric_id: String,
    /// Fewer than `k` candidates were available.
    pub truncated: bool,
    /// Instructions dropped because one of the two responses was unusable.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<InstructionId>,
}

impl SelectionResult {
    pub fn instruction_ids(&self) -> impl Iterator<Item = &InstructionId> {
        self.picks.iter().map(|p| &p.instruction_id)
    }
}

/// Response similarity per judgeable instruction for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTable {
    pub pair: PairKey,
    pub metric_id: String,
    pub values: BTreeMap<InstructionId, f64>,
    pub excluded: Vec<InstructionId>,
}

/// Instructions (in pool order) for which both models produced a usable
/// response, plus the ones that had to be excluded.
pub fn judgeable(
    pair: &PairKey,
    pool: &[InstructionId],
    responses: &ResponseStore,
) -> (Vec<InstructionId>, Vec<InstructionId>) {
    let mut ok = Vec::new();
    let mut excluded = Vec::new();
    for id in pool {
        let usable = |m: &ModelId| responses.get(id, m).is_some_and(|r| r.is_usable());
        if usable(pair.model_a()) && usable(pair.model_b()) {
            ok.push(id.clone());
        } else {
            excluded.push(id.clone());
        }
    }
    (ok, excluded)
}

pub fn response_similarity_table(
    pair: &PairKey,
    pool: &[InstructionId],
    responses: &ResponseStore,
    sim: &dyn SimilarityBackend,
) -> Result<SimilarityTable, SelectError> {
    let (ok, excluded) = judgeable(pair, pool, responses);
    if ok.is_empty() {
        return Err(SelectError::EmptyCandidates(pair.clone()));
    }
    let texts: Vec<(&str, &str)> = ok
        .iter()
        .map(|id| {
            (
                responses.get(id, pair.model_a()).unwrap().text.as_str(),
                responses.get(id, pair.model_b()).unwrap().text.as_str(),
            )
        })
        .collect();
    let scores = sim.similarities(&texts)?;
    Ok(SimilarityTable {
        pair: pair.clone(),
        metric_id: sim.metric_id(),
        values: ok.into_iter().zip(scores).collect(),
        excluded,
    })
}

/// Greedy diversity-regularized selection over a precomputed table.
///
/// Ties on the objective go to the smallest instruction id. `embeddings` must
/// cover every candidate when `lambda > 0`; with `lambda == 0` it may be empty,
/// in which case penalties are not recorded.
pub fn select_mad(
    table: &SimilarityTable,
    embeddings: &HashMap<InstructionId, EmbeddingVector>,
    k: usize,
    lambda: f64,
    aggregation: SetAggregation,
) -> Result<SelectionResult, SelectError> {
    if k == 0 {
        return Err(SelectError::ZeroK);
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(SelectError::InvalidLambda(lambda));
    }
    if table.values.is_empty() {
        return Err(SelectError::EmptyCandidates(table.pair.clone()));
    }
    // BTreeMap iteration is ascending by id, which gives the tie-break order.
    let candidates: Vec<(&InstructionId, f64)> =
        table.values.iter().map(|(id, s)| (id, *s)).collect();
    let have_embeddings = candidates.iter().all(|(id, _)| embeddings.contains_key(*id));
    if lambda > 0.0 && !have_embeddings {
        let missing = candidates
            .iter()
            .find(|(id, _)| !embeddings.contains_key(*id))
            .unwrap();
        return Err(SelectError::MissingEmbedding(missing.0.clone()));
    }

    let n = candidates.len();
    let take = k.min(n);
    let mut taken = vec![false; n];
    // Running max or sum of similarity to the picked set.
    let mut acc = vec![0.0f64; n];
    let mut picks = Vec::with_capacity(take);

    for step in 0..take {
        let penalty = |c: usize| -> f64 {
            match (step, aggregation) {
                (0, _) => 0.0,
                (_, SetAggregation::Max) => acc[c],
                (_, SetAggregation::Mean) => acc[c] / step as f64,
            }
        };
        let mut best: Option<(usize, f64)> = None;
        for c in (0..n).filter(|&c| !taken[c]) {
            let obj = candidates[c].1 + lambda * penalty(c);
            if best.is_none_or(|(_, b)| obj < b) {
                best = Some((c, obj));
            }
        }
        let (chosen, objective) = best.expect("take <= n leaves a candidate");
        picks.push(Pick {
            instruction_id: candidates[chosen].0.clone(),
            response_similarity: Some(candidates[chosen].1),
            diversity_penalty: have_embeddings.then(|| penalty(chosen)),
            objective: Some(objective),
        });
        taken[chosen] = true;

        if have_embeddings && step + 1 < take {
            let e_chosen = &embeddings[candidates[chosen].0];
            for c in (0..n).filter(|&c| !taken[c]) {
                let s = cosine(&embeddings[candidates[c].0], e_chosen)?;
                acc[c] = match (step, aggregation) {
                    (0, _) => s,
                    (_, SetAggregation::Max) => acc[c].max(s),
                    (_, SetAggregation::Mean) => acc[c] + s,
                };
            }
        }
    }

    Ok(SelectionResult {
        pair: table.pair.clone(),
        strategy: Strategy::Mad,
        picks,
        k,
        lambda: Some(lambda),
        metric_id: table.metric_id.clone(),
        truncated: k > n,
        excluded: table.excluded.clone(),
    })
}

/// Uniform sample without replacement, reproducible from `seed`. Input order
/// does not matter: ids are sorted before sampling.
pub fn select_random(
    pair: &PairKey,
    pool: &[InstructionId],
    k: usize,
    seed: u64,
) -> Result<SelectionResult, SelectError> {
    if k == 0 {
        return Err(SelectError::ZeroK);
    }
    let mut ids = pool.to_vec();
    ids.sort();
    ids.dedup();
    let take = k.min(ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, ids.len(), take)
        .into_iter()
        .map(|i| Pick {
            instruction_id: ids[i].clone(),
            response_similarity: None,
            diversity_penalty: None,
            objective: None,
        })
        .collect();
    Ok(SelectionResult {
        pair: pair.clone(),
        strategy: Strategy::Random,
        picks,
        k,
        lambda: None,
        metric_id: "none".into(),
        truncated: k > ids.len(),
        excluded: Vec::new(),
    })
}

/// Per-pair override of the number of instructions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KOverride {
    pub a: ModelId,
    pub b: ModelId,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionParams {
    pub k: usize,
    pub lambda: f64,
    pub aggregation: SetAggregation,
    pub strategy: Strategy,
    /// Seed for the random strategy; each pair derives its own stream.
    pub seed: u64,
    #[serde(rename = "k_override", skip_serializing_if = "Vec::is_empty")]
    pub k_overrides: Vec<KOverride>,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            k: 10,
            lambda: 1.0,
            aggregation: SetAggregation::Max,
            strategy: Strategy::Mad,
            seed: 0,
            k_overrides: Vec::new(),
        }
    }
}

impl SelectionParams {
    pub fn k_for(&self, pair: &PairKey) -> usize {
        self.k_overrides
            .iter()
            .find(|o| canonical_pair(&o.a, &o.b).is_ok_and(|p| &p == pair))
            .map_or(self.k, |o| o.k)
    }

    fn pair_seed(&self, pair: &PairKey) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(pair.model_a().as_str().as_bytes());
        h.update([0]);
        h.update(pair.model_b().as_str().as_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }
}

/// Shared read-only inputs of a selection run.
pub struct SelectionInputs<'a> {
    pub pool: &'a [InstructionId],
    pub responses: &'a ResponseStore,
    pub similarity: &'a dyn SimilarityBackend,
    /// Instruction embeddings for the diversity term.
    pub embeddings: &'a HashMap<InstructionId, EmbeddingVector>,
}

/// Selections for a set of pairs. Pairs that failed are reported, not dropped.
#[derive(Debug, Default)]
pub struct ResponseSet {
    pub selections: BTreeMap<PairKey, SelectionResult>,
    pub failures: BTreeMap<PairKey, SelectError>,
}

impl ResponseSet {
    /// Number of response pairs to be judged.
    pub fn total_pairs(&self) -> usize {
        self.selections.values().map(|s| s.picks.len()).sum()
    }

    pub fn any_truncated(&self) -> bool {
        self.selections.values().any(|s| s.truncated)
    }
}

pub fn select_pair(
    pair: &PairKey,
    inputs: &SelectionInputs<'_>,
    params: &SelectionParams,
) -> Result<SelectionResult, SelectError> {
    let k = params.k_for(pair);
    match params.strategy {
        Strategy::Mad => {
            let table =
                response_similarity_table(pair, inputs.pool, inputs.responses, inputs.similarity)?;
            select_mad(&table, inputs.embeddings, k, params.lambda, params.aggregation)
        }
        Strategy::Random => {
            let (ok, excluded) = judgeable(pair, inputs.pool, inputs.responses);
            if ok.is_empty() {
                return Err(SelectError::EmptyCandidates(pair.clone()));
            }
            let mut r = select_random(pair, &ok, k, params.pair_seed(pair))?;
            r.excluded = excluded;
            Ok(r)
        }
    }
}

fn select_pairs(
    pairs: Vec<PairKey>,
    inputs: &SelectionInputs<'_>,
    params: &SelectionParams,
) -> ResponseSet {
    let results: Vec<(PairKey, Result<SelectionResult, SelectError>)> = pairs
        .into_par_iter()
        .map(|p| {
            let r = select_pair(&p, inputs, params);
            (p, r)
        })
        .collect();
    let mut set = ResponseSet::default();
    for (p, r) in results {
        match r {
            Ok(s) => {
                set.selections.insert(p, s);
            }
            Err(e) => {
                log::warn!("selection failed for {p}: {e}");
                set.failures.insert(p, e);
            }
        }
    }
    set
}

/// Selections for every pair of `models`.
pub fn build_response_set(
    models: &[ModelId],
    inputs: &SelectionInputs<'_>,
    params: &SelectionParams,
) -> Result<ResponseSet, SelectError> {
    Ok(select_pairs(all_pairs(models)?, inputs, params))
}

/// Selections pairing `new_model` with each existing model only.
pub fn select_for_new_model(
    existing: &[ModelId],
    new_model: &ModelId,
    inputs: &SelectionInputs<'_>,
    params: &SelectionParams,
) -> Result<ResponseSet, SelectError> {
    if existing.contains(new_model) {
        return Err(SelectError::DuplicateModel(new_model.clone()));
    }
    let pairs = existing
        .iter()
        .map(|m| canonical_pair(m, new_model))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(select_pairs(pairs, inputs, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Response, ResponseStatus};
    use std::collections::BTreeSet;

    fn iid(s: &str) -> InstructionId {
        InstructionId::from(s)
    }

    fn pair() -> PairKey {
        canonical_pair(&ModelId::from("a"), &ModelId::from("b")).unwrap()
    }

    fn table(entries: &[(&str, f64)]) -> SimilarityTable {
        SimilarityTable {
            pair: pair(),
            metric_id: "test".into(),
            values: entries.iter().map(|(k, v)| (iid(k), *v)).collect(),
            excluded: vec![],
        }
    }

    fn emb(entries: &[(&str, &[f64])]) -> HashMap<InstructionId, EmbeddingVector> {
        entries
            .iter()
            .map(|(k, v)| (iid(k), EmbeddingVector::new(v.to_vec()).unwrap()))
            .collect()
    }

    fn ids(r: &SelectionResult) -> Vec<&str> {
        r.picks.iter().map(|p| p.instruction_id.as_str()).collect()
    }

    #[test]
    fn lambda_zero_takes_least_similar() {
        let t = table(&[("x1", 0.9), ("x2", 0.2), ("x3", 0.5)]);
        let r = select_mad(&t, &HashMap::new(), 2, 0.0, SetAggregation::Max).unwrap();
        assert_eq!(ids(&r), vec!["x2", "x3"]);
        assert!(!r.truncated);
        assert_eq!(r.picks[0].objective, Some(0.2));
        assert_eq!(r.picks[0].diversity_penalty, None);
    }

    #[test]
    fn diversity_penalty_skips_duplicate() {
        let t = table(&[("x1", 0.9), ("x2", 0.2), ("x3", 0.5)]);
        let e = emb(&[("x1", &[0.0, 1.0]), ("x2", &[1.0, 0.0]), ("x3", &[1.0, 0.0])]);
        let r = select_mad(&t, &e, 2, 10.0, SetAggregation::Max).unwrap();
        assert_eq!(ids(&r), vec!["x2", "x1"]);
        assert_eq!(r.picks[0].diversity_penalty, Some(0.0));
        assert_eq!(r.picks[1].diversity_penalty, Some(0.0));
        assert_eq!(r.picks[1].objective, Some(0.9));
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let t = table(&[("x2", 0.4), ("x1", 0.4)]);
        let r = select_mad(&t, &HashMap::new(), 1, 0.0, SetAggregation::Max).unwrap();
        assert_eq!(ids(&r), vec!["x1"]);
    }

    #[test]
    fn k_larger_than_pool_truncates() {
        let t = table(&[("x1", 0.1), ("x2", 0.2)]);
        let r = select_mad(&t, &HashMap::new(), 5, 0.0, SetAggregation::Max).unwrap();
        assert_eq!(r.picks.len(), 2);
        assert!(r.truncated);
    }

    #[test]
    fn invalid_arguments() {
        let t = table(&[("x1", 0.1)]);
        assert!(matches!(
            select_mad(&t, &HashMap::new(), 0, 0.0, SetAggregation::Max),
            Err(SelectError::ZeroK)
        ));
        assert!(matches!(
            select_mad(&t, &HashMap::new(), 1, -1.0, SetAggregation::Max),
            Err(SelectError::InvalidLambda(_))
        ));
        assert!(matches!(
            select_mad(&t, &HashMap::new(), 1, 1.0, SetAggregation::Max),
            Err(SelectError::MissingEmbedding(_))
        ));
        assert!(matches!(
            select_mad(&table(&[]), &HashMap::new(), 1, 0.0, SetAggregation::Max),
            Err(SelectError::EmptyCandidates(_))
        ));
    }

    #[test]
    fn mean_aggregation_averages() {
        let t = table(&[("x1", 0.0), ("x2", 0.0), ("x3", 0.5), ("x4", 0.45)]);
        let e = emb(&[
            ("x1", &[1.0, 0.0]),
            ("x2", &[0.0, 1.0]),
            ("x3", &[1.0, 0.0]),
            ("x4", &[1.0, 1.0]),
        ]);
        let r = select_mad(&t, &e, 3, 1.0, SetAggregation::Mean).unwrap();
        // x1, then x2 (penalty 0), then x3 mean(1, 0)=0.5 -> 1.0 vs x4 mean(.707,.707) -> 1.157
        assert_eq!(ids(&r), vec!["x1", "x2", "x3"]);
        assert_eq!(r.picks[2].diversity_penalty, Some(0.5));
        let max = select_mad(&t, &e, 3, 1.0, SetAggregation::Max).unwrap();
        // Max: x3 -> 0.5 + 1 = 1.5, x4 -> 0.45 + 0.707 = 1.157
        assert_eq!(ids(&max), vec!["x1", "x2", "x4"]);
    }

    #[test]
    fn random_selection_is_seeded() {
        let pool: Vec<InstructionId> = (0..100).map(|i| iid(&format!("x{i:03}"))).collect();
        let a = select_random(&pair(), &pool, 10, 7).unwrap();
        let b = select_random(&pair(), &pool, 10, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.picks.iter().map(|p| &p.instruction_id).collect::<BTreeSet<_>>().len(), 10);
        assert!(a.picks.iter().all(|p| p.objective.is_none()));

        let mut shuffled = pool.clone();
        shuffled.reverse();
        assert_eq!(select_random(&pair(), &shuffled, 10, 7).unwrap(), a);
    }

    #[test]
    fn random_exhausts_small_pools() {
        let pool: Vec<InstructionId> = (0..5).map(|i| iid(&format!("x{i}"))).collect();
        let r = select_random(&pair(), &pool, 5, 1).unwrap();
        let got: BTreeSet<_> = r.instruction_ids().cloned().collect();
        assert_eq!(got, pool.iter().cloned().collect());
        assert!(!r.truncated);
        assert!(select_random(&pair(), &pool, 6, 1).unwrap().truncated);
    }

    fn resp(i: &str, m: &str, text: &str, status: ResponseStatus) -> Response {
        Response {
            instruction_id: iid(i),
            model_id: ModelId::from(m),
            text: text.into(),
            embedding_key: None,
            status,
            latency_ms: 0,
        }
    }

    struct Exact;
    impl SimilarityBackend for Exact {
        fn metric_id(&self) -> String {
            "exact".into()
        }
        fn similarities(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, EmbedError> {
            Ok(pairs.iter().map(|(a, b)| if a == b { 1.0 } else { 0.0 }).collect())
        }
    }

    #[test]
    fn similarity_table_excludes_failed_responses() {
        let pool = vec![iid("x1"), iid("x2"), iid("x3")];
        let mut store = ResponseStore::new();
        for x in ["x1", "x2", "x3"] {
            store.insert(resp(x, "a", "same", ResponseStatus::Ok));
            store.insert(resp(x, "b", if x == "x1" { "same" } else { "other" }, ResponseStatus::Ok));
        }
        let t = response_similarity_table(&pair(), &pool, &store, &Exact).unwrap();
        assert_eq!(t.values.len(), 3);
        assert_eq!(t.values[&iid("x1")], 1.0);

        store.insert(resp("x2", "b", "", ResponseStatus::Failed));
        let t = response_similarity_table(&pair(), &pool, &store, &Exact).unwrap();
        assert_eq!(t.values.len(), 2);
        assert_eq!(t.excluded, vec![iid("x2")]);

        let empty = ResponseStore::new();
        assert!(matches!(
            response_similarity_table(&pair(), &pool, &empty, &Exact),
            Err(SelectError::EmptyCandidates(_))
        ));
    }

    #[test]
    fn k_overrides_apply_to_either_order() {
        let params = SelectionParams {
            k_overrides: vec![KOverride {
                a: ModelId::from("b"),
                b: ModelId::from("a"),
                k: 3,
            }],
            ..Default::default()
        };
        assert_eq!(params.k_for(&pair()), 3);
        let other = canonical_pair(&ModelId::from("a"), &ModelId::from("c")).unwrap();
        assert_eq!(params.k_for(&other), 10);
    }
}
