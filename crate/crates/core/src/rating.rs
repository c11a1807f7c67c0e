//! Elo aggregation of 3-AFC judgments.
//!
//! The online update moves both ratings by `eta * (actual - expected)`, with the
//! logistic expected score `1 / (1 + 10^((s_other - s_self) / tau))`. Because
//! the online fold depends on judgment order, [`elo_bootstrap`] re-rates `r`
//! resamples (with replacement, same size as the data) and averages them.
//!
//! Resampling uses ChaCha8 seeded with `cfg.seed`, replicate `i` reading stream
//! `i`, so reports reproduce across platforms and thread counts.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EloConfig, Judgment, ModelError, ModelId, Outcome, RatingTable};

#[derive(Debug, Error)]
pub enum RatingError {
    #[error("non-finite rating in Elo update ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("judgment references unknown model `{0}`")]
    UnknownModel(ModelId),
    #[error("no judgments to rate")]
    EmptyInput,
    #[error("rank vectors differ in length ({0} vs {1})")]
    Shape(usize, usize),
    #[error("ranks must be a permutation of 1..={0}")]
    NotPermutation(usize),
    #[error("at least two ranks are needed")]
    TooShort,
    #[error(transparent)]
    Config(#[from] ModelError),
}

#[inline]
fn expected_score(s_self: f64, s_other: f64, tau: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((s_other - s_self) / tau))
}

/// One online Elo step. `w` is the score of `i` (1 win, 0.5 tie, 0 loss).
pub fn elo_update(s_i: f64, s_j: f64, w: f64, cfg: &EloConfig) -> Result<(f64, f64), RatingError> {
    if !s_i.is_finite() || !s_j.is_finite() {
        return Err(RatingError::NonFinite(s_i, s_j));
    }
    let e_i = expected_score(s_i, s_j, cfg.tau);
    let e_j = expected_score(s_j, s_i, cfg.tau);
    let next = (s_i + cfg.eta * (w - e_i), s_j + cfg.eta * ((1.0 - w) - e_j));
    if !next.0.is_finite() || !next.1.is_finite() {
        return Err(RatingError::NonFinite(next.0, next.1));
    }
    Ok(next)
}

/// Judgments reduced to model indices: `(a, b, w)`.
fn index_judgments(
    judgments: &[Judgment],
    models: &[ModelId],
) -> Result<Vec<(usize, usize, f64)>, RatingError> {
    let index: HashMap<&ModelId, usize> = models.iter().enumerate().map(|(i, m)| (m, i)).collect();
    judgments
        .iter()
        .map(|j| {
            let a = *index
                .get(j.pair.model_a())
                .ok_or_else(|| RatingError::UnknownModel(j.pair.model_a().clone()))?;
            let b = *index
                .get(j.pair.model_b())
                .ok_or_else(|| RatingError::UnknownModel(j.pair.model_b().clone()))?;
            Ok((a, b, j.outcome.value()))
        })
        .collect()
}

fn fold(
    events: impl Iterator<Item = (usize, usize, f64)>,
    n_models: usize,
    cfg: &EloConfig,
) -> Result<Vec<f64>, RatingError> {
    let mut s = vec![cfg.s0; n_models];
    for (a, b, w) in events {
        let (na, nb) = elo_update(s[a], s[b], w, cfg)?;
        s[a] = na;
        s[b] = nb;
    }
    Ok(s)
}

/// Folds [`elo_update`] over `judgments` in order, starting every model at `s0`.
pub fn elo_sequence(
    judgments: &[Judgment],
    models: &[ModelId],
    cfg: &EloConfig,
) -> Result<BTreeMap<ModelId, f64>, RatingError> {
    cfg.validate()?;
    let events = index_judgments(judgments, models)?;
    let s = fold(events.into_iter(), models.len(), cfg)?;
    Ok(models.iter().cloned().zip(s).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEntry {
    pub model: ModelId,
    pub mean_rating: f64,
    pub rating_std: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    /// Sorted by rank.
    pub entries: Vec<BootstrapEntry>,
    pub replicates: usize,
    pub seed: u64,
    pub judgments: usize,
}

impl BootstrapReport {
    pub fn table(&self) -> RatingTable {
        RatingTable::from_ratings(
            self.entries
                .iter()
                .map(|e| (e.model.clone(), e.mean_rating, e.rating_std)),
        )
    }

    pub fn mean_of(&self, model: &ModelId) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| &e.model == model)
            .map(|e| e.mean_rating)
    }
}

/// The resample indices of replicate `replicate` for `n` judgments.
pub fn bootstrap_indices(seed: u64, replicate: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    (0..n)
        .map(|_| rng.random_range(0..n as u64) as usize)
        .collect()
}

/// Bootstrap-averaged Elo ratings with the default resampler.
pub fn elo_bootstrap(
    judgments: &[Judgment],
    models: &[ModelId],
    cfg: &EloConfig,
) -> Result<BootstrapReport, RatingError> {
    elo_bootstrap_with(judgments, models, cfg, |r, n| {
        bootstrap_indices(cfg.seed, r, n)
    })
}

/// Bootstrap with an injected resampler `(replicate, n) -> indices`.
pub fn elo_bootstrap_with<F>(
    judgments: &[Judgment],
    models: &[ModelId],
    cfg: &EloConfig,
    resample: F,
) -> Result<BootstrapReport, RatingError>
where
    F: Fn(usize, usize) -> Vec<usize> + Sync,
{
    cfg.validate()?;
    if judgments.is_empty() {
        return Err(RatingError::EmptyInput);
    }
    let events = index_judgments(judgments, models)?;
    let n = events.len();
    let replicates: Vec<Vec<f64>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let idx = resample(r, n);
            fold(idx.into_iter().map(|i| events[i]), models.len(), cfg)
        })
        .collect::<Result<_, _>>()?;

    // Sequential reduce in replicate order keeps the result independent of scheduling.
    let r = replicates.len() as f64;
    let mut mean = vec![0.0; models.len()];
    for rep in &replicates {
        for (m, v) in mean.iter_mut().zip(rep) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= r);
    let mut var = vec![0.0; models.len()];
    for rep in &replicates {
        for ((acc, v), m) in var.iter_mut().zip(rep).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let table = RatingTable::from_ratings(
        models
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), mean[i], (var[i] / r).sqrt())),
    );
    Ok(BootstrapReport {
        entries: table
            .rows
            .into_iter()
            .map(|row| BootstrapEntry {
                model: row.model,
                mean_rating: row.mean_rating,
                rating_std: row.rating_std,
                rank: row.rank,
            })
            .collect(),
        replicates: cfg.replicates,
        seed: cfg.seed,
        judgments: n,
    })
}

/// Spearman rank correlation of two tie-free rankings (permutations of `1..=N`).
pub fn srcc(rank_a: &[usize], rank_b: &[usize]) -> Result<f64, RatingError> {
    if rank_a.len() != rank_b.len() {
        return Err(RatingError::Shape(rank_a.len(), rank_b.len()));
    }
    let n = rank_a.len();
    if n < 2 {
        return Err(RatingError::TooShort);
    }
    for r in [rank_a, rank_b] {
        let mut seen = vec![false; n];
        for &x in r {
            if x == 0 || x > n || std::mem::replace(&mut seen[x - 1], true) {
                return Err(RatingError::NotPermutation(n));
            }
        }
    }
    let d2: u128 = rank_a
        .iter()
        .zip(rank_b)
        .map(|(&a, &b)| (a.abs_diff(b) as u128).pow(2))
        .sum();
    let n = n as u128;
    let denom = n * (n * n - 1);
    // (denom - 6 d2) / denom as one rounding, so e.g. 48/60 is exactly 0.8.
    Ok((denom as f64 - 6.0 * d2 as f64) / denom as f64)
}

/// Pairwise win rates: entry `(i, j)` is the share of `i`-vs-`j` judgments that
/// `i` won outright. Ties count for neither side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinMatrix {
    pub models: Vec<ModelId>,
    wins: Vec<Vec<u32>>,
    games: Vec<Vec<u32>>,
}

impl WinMatrix {
    /// `None` on the diagonal and for pairs without judgments.
    pub fn rate(&self, i: usize, j: usize) -> Option<f64> {
        if i == j || self.games[i][j] == 0 {
            None
        } else {
            Some(self.wins[i][j] as f64 / self.games[i][j] as f64)
        }
    }

    pub fn games(&self, i: usize, j: usize) -> u32 {
        self.games[i][j]
    }

    /// Unordered pairs with at least one judgment.
    pub fn populated_pairs(&self) -> usize {
        let n = self.models.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.games[i][j] > 0)
            .count()
    }

    /// CSV with a header row; `NA` marks absent pairs, `-` the diagonal.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.models.iter().map(|m| m.to_string()));
        w.write_record(&header).unwrap();
        for (i, m) in self.models.iter().enumerate() {
            let mut row = vec![m.to_string()];
            for j in 0..self.models.len() {
                row.push(match (i == j, self.rate(i, j)) {
                    (true, _) => "-".into(),
                    (false, Some(r)) => format_sig17(r),
                    (false, None) => "NA".into(),
                });
            }
            w.write_record(&row).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

pub fn win_matrix(judgments: &[Judgment], models: &[ModelId]) -> WinMatrix {
    let n = models.len();
    let index: HashMap<&ModelId, usize> = models.iter().enumerate().map(|(i, m)| (m, i)).collect();
    let mut wins = vec![vec![0u32; n]; n];
    let mut games = vec![vec![0u32; n]; n];
    for j in judgments {
        let (Some(&a), Some(&b)) = (index.get(j.pair.model_a()), index.get(j.pair.model_b()))
        else {
            log::warn!("win matrix: skipping judgment for unknown pair {}", j.pair);
            continue;
        };
        games[a][b] += 1;
        games[b][a] += 1;
        if j.outcome == Outcome::A_WINS {
            wins[a][b] += 1;
        } else if j.outcome == Outcome::B_WINS {
            wins[b][a] += 1;
        }
    }
    WinMatrix {
        models: models.to_vec(),
        wins,
        games,
    }
}

/// Fixed-point rendering with 17 significant digits.
pub fn format_sig17(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.16}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (16 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Plain-text leaderboard.
pub fn leaderboard(table: &RatingTable, display_names: &HashMap<ModelId, String>) -> String {
    let name = |m: &ModelId| {
        display_names
            .get(m)
            .filter(|n| !n.is_empty())
            .cloned()
            .unwrap_or_else(|| m.to_string())
    };
    let width = table
        .rows
        .iter()
        .map(|r| name(&r.model).chars().count())
        .max()
        .unwrap_or(5)
        .max(5);
    let mut out = String::new();
    writeln!(out, "{:>4}  {:<width$}  {:>10}  {:>8}", "Rank", "Model", "Elo", "Std").unwrap();
    for r in &table.rows {
        writeln!(
            out,
            "{:>4}  {:<width$}  {:>10.1}  {:>8.2}",
            r.rank,
            name(&r.model),
            r.mean_rating,
            r.rating_std
        )
        .unwrap();
    }
    out
}

/// CSV rating table with full-precision values.
pub fn ratings_csv(table: &RatingTable) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rank", "model", "mean_rating", "rating_std"]).unwrap();
    for r in &table.rows {
        w.write_record([
            r.rank.to_string(),
            r.model.to_string(),
            format_sig17(r.mean_rating),
            format_sig17(r.rating_std),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}
