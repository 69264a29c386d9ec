//! Asymmetric masked distillation for masked-autoencoder pre-training.
//!
//! A frozen teacher encoder sees a lower-masking-ratio view of each clip while
//! a smaller student encoder sees a nested subset of the teacher's visible
//! tubes. The student is trained with pixel reconstruction plus two feature
//! alignment terms: direct alignment on the tokens both branches see, and
//! generation alignment that predicts the teacher's features on the tokens
//! only the teacher sees.
//!
//! Layout:
//! - [`numcore`]: dense tensors and reverse-mode autodiff
//! - [`tokenize`]: cube embedding, sinusoidal position encodings, target normalization
//! - [`masking`]: tube masks and nested student/teacher visible sets
//! - [`network`]: ViT encoder, reconstruction decoder, feature generator, projections
//! - [`distill`]: alignment strategies and the combined objective
//! - [`trainer`]: synthetic data, AdamW, schedules, checkpoints, training loops
//! - [`config`]: run configuration, presets and cross-field validation

pub mod config;
pub mod distill;
pub mod error;
pub mod masking;
pub mod network;
pub mod numcore;
pub mod rng;
pub mod tokenize;
pub mod trainer;

pub use error::{Error, Result};
pub use numcore::{Graph, Tensor, Var};
