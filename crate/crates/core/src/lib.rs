//! Long-tail ICD code augmentation toolkit.
//!
//! Stratifies codes by training frequency, budgets synthetic notes with
//! log-inverse allocation, builds anchored code sets by cloning or sibling
//! substitution, assembles knowledge-injected prompts, drives a text
//! generator and evaluates multi-label predictions.

pub mod anchoring;
pub mod code;
pub mod corpus;
pub mod evalkit;
pub mod generation;
pub mod planner;
pub mod prompting;
pub mod seed;
pub mod taxonomy;

pub use code::{CodeError, CodeId, CodeSystem};
pub use corpus::{Corpus, Note, Origin};
pub use taxonomy::{KnowledgeCard, Taxonomy};
