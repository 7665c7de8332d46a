//! AESL: multi-label class-incremental emotion decoding.

pub mod baselines;
pub mod config;
pub mod data;
pub mod decoupling;
pub mod distillation;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod graph;
pub mod numerics;
pub mod semantics;
pub mod trainer;

pub use error::{AeslError, Result};
