//! Mask fine-tuning of frozen weights on a toy vision-language model.
//!
//! A frozen weight `W` is reparameterized as `W ⊙ M`, where the mask `M` is
//! derived from a trainable score matrix, either by top-k magnitude selection
//! (hard mask) or a tempered sigmoid (soft mask). The crate holds a small
//! reverse-mode autodiff tape, the masking layer, a toy decoder with a vision
//! prefix, training loops with full and low-rank baselines, analysis reports
//! and a command-line front end.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod masking;
pub mod model;
pub mod runspec;
pub mod tensor;
pub mod training;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use tensor::Tensor;
