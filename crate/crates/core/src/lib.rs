//! Interval-aware sequential recommendation.

pub mod autograd;
pub mod baselines;
pub mod benchmark;
pub mod checkpoint;
pub mod dataset;
pub mod embedders;
pub mod error;
pub mod experiment;
pub mod interval_attention;
pub mod lm;
pub mod optim;
pub mod pipeline;
pub mod prompt;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
