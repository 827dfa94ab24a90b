//! Pairwise A/B realism study engine.
//!
//! [`make_batch`] schedules comparison and sentinel trials, [`ResponseStore`]
//! persists answers exactly once per (session, trial), [`aggregate`] turns
//! them into preference rates with exact binomial p-values, and
//! [`server::router`] exposes all of it over HTTP.

pub mod batch;
pub mod error;
pub mod server;
pub mod stats;
pub mod store;

pub use batch::{make_batch, ComparisonTrial, ConditionSet, SentinelSpec, Side, StudyBatch, TimingMode, DURATIONS_MS};
pub use error::{Result, StudyError};
pub use stats::{aggregate, binomial_two_sided_p, render_table, PairResult, StudyResult};
pub use store::{Choice, Response, ResponseStore};
