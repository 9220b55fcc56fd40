//! Mixture-of-prompts adaptation of a frozen transformer backbone.

#![allow(clippy::needless_range_loop)]

pub mod backbone;
pub mod compression;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod federated;
pub mod mop;
pub mod numerics;
pub mod trainer;

pub use backbone::{Backbone, ModelConfig};
pub use corpus::{Sample, TaskCorpus, TaskKind, TaskSpec};
pub use error::{MopsError, Result};
pub use numerics::{Mask, Matrix};
