//! Information-capacity evaluation: compression gain per unit of log-scale
//! inference compute, with the tokenizer, FLOPs, entropy-coding and corpus
//! machinery the metric needs.

pub mod codec;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod flops;
pub mod metric;
pub mod report;
pub mod tokenizer;

pub use error::{Error, Result};
