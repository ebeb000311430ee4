//! Desk-scale training pipeline for a toy volumetric vision-language model.

pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod prompts;
pub mod rewards;
pub mod rng;
pub mod sft;
pub mod text;

pub use error::{Result, VoxError};
