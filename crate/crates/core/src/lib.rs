//! Re-identification based auditing of embedding datasets produced by generative video
//! models: predictor heads, pair verification metrics, P_max privacy filtering, generative
//! recall accounting and temporal consistency.

pub mod audit;
pub mod consistency;
pub mod embedding_store;
pub mod error;
pub mod head_trainer;
pub mod pair_eval;
pub mod privacy_filter;
pub mod recall_analyzer;
pub mod seeding;
pub mod similarity;
pub mod synthbench;

pub use error::{Error, ErrorClass, Result};
