pub mod charword;
pub mod cli;
pub mod cnnclassifier;
pub mod compute;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod inference;
pub mod pipeline;
pub mod seq2seq;
pub mod trainer;

pub use error::ModelError;
