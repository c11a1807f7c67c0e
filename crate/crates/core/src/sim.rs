//! Simulated annotators for desk-scale runs without humans.
//!
//! Preferences follow the same logistic curve as the Elo expected score:
//! `P(a beats b) = 1 / (1 + 10^((θ_b - θ_a) / 400))`. Ties get weight
//! `t = tie_width * 10^(-|θ_a - θ_b| / 400)`, i.e. probability `t / (1 + t)`,
//! and the two win outcomes share the remainder in logistic proportion.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::{a_on_left, Task};
use crate::model::{Choice, InstructionId, Judgment, ModelId, Outcome, PairKey};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("no skill configured for model `{0}`")]
    UnknownModel(ModelId),
    #[error("tie_width must be >= 0 (got {0})")]
    InvalidTieWidth(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedAnnotator {
    pub skills: BTreeMap<ModelId, f64>,
    pub tie_width: f64,
    pub seed: u64,
}

/// `(P(a wins), P(tie), P(b wins))`.
pub type OutcomeProbabilities = (f64, f64, f64);

impl SimulatedAnnotator {
    pub fn new(skills: BTreeMap<ModelId, f64>, tie_width: f64, seed: u64) -> Result<Self, SimError> {
        if tie_width.is_nan() || tie_width < 0.0 {
            return Err(SimError::InvalidTieWidth(tie_width));
        }
        Ok(Self {
            skills,
            tie_width,
            seed,
        })
    }

    fn skill(&self, m: &ModelId) -> Result<f64, SimError> {
        self.skills
            .get(m)
            .copied()
            .ok_or_else(|| SimError::UnknownModel(m.clone()))
    }

    pub fn probabilities(&self, pair: &PairKey) -> Result<OutcomeProbabilities, SimError> {
        let (ta, tb) = (self.skill(pair.model_a())?, self.skill(pair.model_b())?);
        if self.tie_width.is_infinite() {
            return Ok((0.0, 1.0, 0.0));
        }
        let p = 1.0 / (1.0 + 10f64.powf((tb - ta) / 400.0));
        let t = self.tie_width * 10f64.powf(-(ta - tb).abs() / 400.0);
        let tie = t / (1.0 + t);
        Ok(((1.0 - tie) * p, tie, (1.0 - tie) * (1.0 - p)))
    }

    /// Canonical outcome; a pure function of `(seed, pair, instruction, annotator)`.
    pub fn outcome(
        &self,
        pair: &PairKey,
        instruction: &InstructionId,
        annotator: &str,
    ) -> Result<Outcome, SimError> {
        let (pa, pt, _) = self.probabilities(pair)?;
        let mut h = Sha256::new();
        for part in [
            pair.model_a().as_str(),
            pair.model_b().as_str(),
            instruction.as_str(),
            annotator,
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.update(self.seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let u: f64 = rng.random();
        Ok(if u < pa {
            Outcome::A_WINS
        } else if u < pa + pt {
            Outcome::TIE
        } else {
            Outcome::B_WINS
        })
    }

    /// The button this annotator presses for a served task.
    pub fn choose(&self, task: &Task, annotator: &str) -> Result<Choice, SimError> {
        let w = self.outcome(&task.pair, &task.instruction_id, annotator)?;
        let a_left = &task.left_is == task.pair.model_a();
        Ok(match (w, a_left) {
            (w, _) if w == Outcome::TIE => Choice::Tie,
            (w, true) if w == Outcome::A_WINS => Choice::Left,
            (_, true) => Choice::Right,
            (w, false) if w == Outcome::A_WINS => Choice::Right,
            (_, false) => Choice::Left,
        })
    }
}

/// One simulated judgment, with sides assigned by the task coin under `side_seed`.
pub fn simulate_judgment(
    pair: &PairKey,
    instruction: &InstructionId,
    annotator_id: &str,
    annotator: &SimulatedAnnotator,
    side_seed: u64,
    submitted_at: DateTime<Utc>,
) -> Result<Judgment, SimError> {
    let outcome = annotator.outcome(pair, instruction, annotator_id)?;
    let presented_left = if a_on_left(side_seed, pair, instruction) {
        pair.model_a()
    } else {
        pair.model_b()
    };
    Ok(Judgment {
        pair: pair.clone(),
        instruction_id: instruction.clone(),
        annotator_id: annotator_id.to_owned(),
        outcome,
        presented_left: presented_left.clone(),
        submitted_at,
    })
}
