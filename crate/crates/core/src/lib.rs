//! Stage-wise multi-agent bug fixing: corpus preparation, BM25
//! demonstration retrieval, prompt rendering, chat backends, the staged
//! pipeline runner and patch metrics.

pub mod backend;
pub mod cli;
pub mod corpus;
pub mod metrics;
pub mod orchestrator;
pub mod prompting;
pub mod retrieval;
pub mod token;
pub mod transcript;
