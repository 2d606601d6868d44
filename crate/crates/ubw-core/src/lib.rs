//! Untargeted backdoor watermarking for image-classification datasets, with
//! black-box dataset-ownership verification.
//!
//! The crate is organized around the pipeline it implements:
//!
//! - [`tensor`]: dense f64 tensors with a reverse-mode tape (second-order capable)
//! - [`nn`]: a small model zoo (MLP, compact CNN), losses, SGD and projected
//!   gradient ascent
//! - [`data`]: dataset loading (IDX, CIFAR binary), synthetic data, subset
//!   selection, seeded RNG streams, and the native dataset container
//! - [`watermark`]: trigger generators, the poisoned-label watermark (UBW-P),
//!   targeted baselines (BadNets/Blended), and the clean-label bi-level
//!   optimizer (UBW-C) driven by gradient matching
//! - [`dispersibility`]: entropy-based dispersibility metrics over prediction
//!   tables
//! - [`verify`]: the black-box ownership verification protocol with a
//!   self-contained Student-t distribution
//! - [`defense`]: fine-tuning and channel-pruning resistance benches
//! - [`eval`]: benign accuracy / attack success rate / dispersibility metrics

pub mod data;
pub mod defense;
pub mod dispersibility;
pub mod error;
pub mod eval;
pub mod nn;
pub mod tensor;
pub mod verify;
pub mod watermark;

pub use error::{Error, Result};
pub use tensor::{Mode, NodeId, Tape, Tensor};
