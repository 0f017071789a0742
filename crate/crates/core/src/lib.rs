//! Forward-only language-image encoder engine with text-guided progressive
//! vision-token pruning and merging.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` kernels over [`FeatureMatrix`] plus MAC counters.
//! - [`vit`]: patch embedding and pre-norm Transformer layers.
//! - [`text`]: word-level tokenizer and a small text encoder.
//! - [`schedule`]: block layout with retain ratios.
//! - [`elip`]: CLS fusion, top-k retention and attention-weighted merging.
//! - [`text_prune`]: text-token pruning ablation strategies.
//! - [`complexity`]: token-layer accounting and MAC estimates.
//! - [`metrics`]: attention entropy, token similarity and mask export.
//! - [`model_io`]: the `ELIPW01` weight file format.

pub mod complexity;
pub mod elip;
pub mod error;
pub mod metrics;
pub mod model;
pub mod model_io;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod text;
pub mod text_prune;
pub mod vit;

pub use error::{Error, Result};
pub use schedule::{BlockSpec, PruneSchedule, RetainRatio};
pub use tensor::FeatureMatrix;
