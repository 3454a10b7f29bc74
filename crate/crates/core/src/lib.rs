//! Few-shot classification with contrastive image/text embeddings by bridging
//! image embeddings into the text modality.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense matrices, pseudo-inverse, softmax, cross-entropy, KL.
//! - [`bridge`]: EOS-norm estimation and the image-to-text bridge.
//! - [`inference`]: blended, sharpened logits and evaluation.
//! - [`training`]: the supervised variant with class-specific biases.
//! - [`hpsearch`]: validation search over the blend parameters.
//! - [`synth`]: synthetic embedding tasks with a controllable modality gap.
//! - [`datastore`]: binary tensor files and task/model manifests.
//! - [`cli`]: the command implementations behind the `semobridge` binary.

pub mod bridge;
pub mod cli;
pub mod datastore;
pub mod error;
pub mod hpsearch;
pub mod inference;
pub mod synth;
pub mod task;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
