//! Report rendering helpers.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{EloConfig, Instruction, InstructionId, Judgment, ModelId, PairKey};
use crate::rating::{elo_bootstrap, format_sig17, srcc, RatingError};
use crate::selector::SelectionResult;

/// Zero-based position of every selected instruction within its pair's picks.
pub fn pick_positions<'a>(
    selections: impl IntoIterator<Item = &'a SelectionResult>,
) -> HashMap<(PairKey, InstructionId), usize> {
    let mut out = HashMap::new();
    for s in selections {
        for (i, p) in s.picks.iter().enumerate() {
            out.insert((s.pair.clone(), p.instruction_id.clone()), i);
        }
    }
    out
}

/// Judgments on each pair's first `k` picks only.
pub fn judgments_within_k(
    judgments: &[Judgment],
    positions: &HashMap<(PairKey, InstructionId), usize>,
    k: usize,
) -> Vec<Judgment> {
    judgments
        .iter()
        .filter(|j| {
            positions
                .get(&(j.pair.clone(), j.instruction_id.clone()))
                .is_some_and(|&p| p < k)
        })
        .cloned()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrccPoint {
    pub k: usize,
    pub srcc: f64,
    pub order: Vec<ModelId>,
}

/// Ranking agreement of every `k' = 1..=k_max` against the ranking from all picks.
pub fn srcc_curve(
    judgments: &[Judgment],
    selections: &[SelectionResult],
    models: &[ModelId],
    elo: &EloConfig,
) -> Result<Vec<SrccPoint>, RatingError> {
    let positions = pick_positions(selections);
    let k_max = selections.iter().map(|s| s.picks.len()).max().unwrap_or(0);
    let full = elo_bootstrap(judgments, models, elo)?.table();
    let full_ranks = full.ranks_for(models).expect("every model is rated");
    let mut points = Vec::new();
    for k in 1..=k_max {
        let subset = judgments_within_k(judgments, &positions, k);
        if subset.is_empty() {
            continue;
        }
        let table = elo_bootstrap(&subset, models, elo)?.table();
        let ranks = table.ranks_for(models).expect("every model is rated");
        points.push(SrccPoint {
            k,
            srcc: srcc(&ranks, &full_ranks)?,
            order: table.order(),
        });
    }
    Ok(points)
}

pub fn srcc_curve_csv(points: &[SrccPoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "srcc", "order"]).unwrap();
    for p in points {
        let order: Vec<&str> = p.order.iter().map(|m| m.as_str()).collect();
        w.write_record([p.k.to_string(), format_sig17(p.srcc), order.join(" > ")])
            .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Selected instructions per pair, in pick order, with their score terms.
pub fn selections_listing(
    selections: &[SelectionResult],
    pool: &HashMap<InstructionId, Instruction>,
) -> String {
    let mut out = String::new();
    let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_owned(), |v| format!("{v:.4}"));
    let by_pair: BTreeMap<&PairKey, &SelectionResult> = selections.iter().map(|s| (&s.pair, s)).collect();
    for (pair, s) in by_pair {
        writeln!(
            out,
            "== {pair} ({:?}, k={}, metric={}{})",
            s.strategy,
            s.k,
            s.metric_id,
            if s.truncated { ", truncated" } else { "" }
        )
        .unwrap();
        for (i, p) in s.picks.iter().enumerate() {
            let text = pool
                .get(&p.instruction_id)
                .map(|ins| ins.text.split_whitespace().collect::<Vec<_>>().join(" "))
                .unwrap_or_default();
            writeln!(
                out,
                "{:>3}. [{}] sim={} div={} obj={}  {}",
                i + 1,
                p.instruction_id,
                fmt(p.response_similarity),
                fmt(p.diversity_penalty),
                fmt(p.objective),
                text
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}
