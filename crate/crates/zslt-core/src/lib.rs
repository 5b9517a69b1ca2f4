//! Cross attribute-guided transformer for zero-shot learning.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`] — dense tensors, a reverse-mode gradient tape, and Adam;
//! - [`fae`] — the feature augmentation encoder with its subtractive
//!   region-geometry bias;
//! - [`avt`] / [`vat`] — the attribute→visual and visual→attribute
//!   cross-attention decoders with their semantic mappings;
//! - [`objectives`] — the five training losses and their weighted composition;
//! - [`model`] — parameter container and the per-image forward pass wiring the
//!   two sub-nets together;
//! - [`inference`] — calibrated fused prediction, CZSL/GZSL metrics, and
//!   attention-map export;
//! - [`data`] — the ZSLT tensor container, dataset assembly, the synthetic
//!   planted-attribute generator, and checkpointing;
//! - [`train`] — the training loop, evaluation driver, and the
//!   finite-difference gradient checker;
//! - [`config`] — run configuration with dotted-key file parsing.
//!
//! Batch loops fan out with rayon when the `parallel` feature (default) is
//! enabled; the sequential fallback produces bit-identical results because
//! per-image work is independent and reductions run in index order.

pub mod config;
pub mod data;
pub mod error;
pub mod fae;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod par;
pub mod train;

pub mod avt;
pub mod decoder;
pub mod vat;

pub use error::{Error, Result};
pub use numerics::scalar::Scalar;
pub use numerics::tensor::Tensor;
