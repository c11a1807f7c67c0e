//! Pairwise human evaluation of text-generation models.
//!
//! For every pair of competing models, [`selector`] picks the few pool
//! instructions on which their responses disagree most (with a diversity
//! penalty), annotators give three-way preferences on those response pairs
//! through [`annotation`], and [`rating`] turns the judgments into a
//! bootstrap-averaged Elo leaderboard. [`pipeline`] drives the whole run.

pub mod annotation;
pub mod clock;
pub mod config;
pub mod embed;
pub mod jsonl;
pub mod model;
pub mod pipeline;
pub mod pool;
pub mod provider;
pub mod rating;
pub mod report;
pub mod selector;
pub mod server;
pub mod sim;
pub mod store;
pub mod template;

pub use model::*;
