//! Toolkit for multitask Text2SQL pipelines: corpus loading, SQL structural
//! analysis, SQLite execution, prompt construction, SFT data synthesis,
//! collaborative inference, and execution-based evaluation.

pub mod catalog;
pub mod eval;
pub mod executor;
pub mod llm;
pub mod mcp;
pub mod prompts;
pub mod sqlkit;
pub mod synth;

pub use catalog::{Corpus, CorpusPair, DatabaseCatalog, TableSchema};
pub use executor::ExecutionOutcome;
pub use sqlkit::{HardnessLevel, Provenance, SchemaSubset, SqlQuery};
