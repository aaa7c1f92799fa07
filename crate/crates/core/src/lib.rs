//! Reward-model training from unlabeled text.
//!
//! Raw documents are turned into prefix/suffix pairs; within a batch each
//! prefix's own continuation is the preferred response and every other
//! continuation in the batch is a rejected one. A small differentiable scorer
//! is trained on that signal with a Bradley-Terry loss plus a score-centering
//! penalty, and then used for best-of-N reranking and group-relative policy
//! optimization of a toy actor. A token/cost estimator for conventional
//! preference-data collection is included for comparison.

pub mod config;
pub mod corpus;
pub mod costs;
pub mod error;
pub mod io;
pub mod objective;
pub mod policy;
pub mod scorer;
pub mod selection;
pub mod splitter;
pub mod trainer;

pub use error::{Error, Result};
