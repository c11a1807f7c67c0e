//! Synthetic inputs shared by the benchmarks.

use std::collections::{BTreeMap, HashMap};

use chrono::DateTime;
use madeval::embed::EmbeddingVector;
use madeval::selector::SimilarityTable;
use madeval::sim::{simulate_judgment, SimulatedAnnotator};
use madeval::{all_pairs, canonical_pair, InstructionId, Judgment, ModelId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A pool of `n` instructions with random similarities and `dims`-wide embeddings.
pub fn selection_inputs(n: usize, dims: usize, seed: u64) -> (SimilarityTable, HashMap<InstructionId, EmbeddingVector>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = canonical_pair(&ModelId::from("a"), &ModelId::from("b")).unwrap();
    let mut values = BTreeMap::new();
    let mut embeddings = HashMap::new();
    for i in 0..n {
        let id = InstructionId::from(format!("i{i:05}"));
        values.insert(id.clone(), rng.random_range(-1.0..1.0));
        embeddings.insert(id, random_vector(&mut rng, dims));
    }
    let table = SimilarityTable {
        pair,
        metric_id: "bench".into(),
        values,
        excluded: Vec::new(),
    };
    (table, embeddings)
}

pub fn random_vector(rng: &mut impl Rng, dims: usize) -> EmbeddingVector {
    EmbeddingVector::new((0..dims).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `per_pair` simulated judgments for every pair of `models` models.
pub fn judgments(models: usize, per_pair: usize) -> (Vec<ModelId>, Vec<Judgment>) {
    let ids: Vec<ModelId> = (0..models).map(|i| ModelId::from(format!("m{i:02}"))).collect();
    let skills = ids.iter().enumerate().map(|(i, m)| (m.clone(), 1000.0 + 25.0 * i as f64)).collect();
    let sim = SimulatedAnnotator::new(skills, 0.2, 1).unwrap();
    let mut out = Vec::new();
    for pair in all_pairs(&ids).unwrap() {
        for k in 0..per_pair {
            let x = InstructionId::from(format!("x{k}"));
            out.push(simulate_judgment(&pair, &x, "bench", &sim, 0, DateTime::UNIX_EPOCH).unwrap());
        }
    }
    (ids, out)
}
