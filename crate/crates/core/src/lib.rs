//! Desk-scale multimodal retinal feature fusion.
//!
//! The crate implements a two-part system. A calibration pipeline fuses six
//! per-modality feature maps through residual adaptation and concatenation,
//! hierarchical squeeze-and-excitation gating, and per-modality recursive
//! cross-attention, ending in a classifier head for multi-label disease
//! classification or ordinal grading. Around it sit the pieces needed to
//! exercise the pipeline end to end: a minimal reverse-mode autodiff engine,
//! the spectral forward model mapping multispectral datacubes to color fundus
//! images, the composite training objectives, evaluation metrics, a
//! deterministic synthetic data generator with planted per-modality disease
//! signatures, and an Adam/cosine-annealing training loop with ablation
//! switches for modalities, calibration nodes and fusion strategies.
//!
//! Numeric kernels, losses and metrics are generic over [`scalar::Scalar`]
//! (`f32` or `f64`); the pipeline itself and all file formats are pinned to
//! the `f64` aliases below, since the gradient-check tolerances assume 64-bit
//! arithmetic.

pub mod error;
pub mod scalar;
pub mod tensor;

pub mod image;
pub mod metrics;
pub mod objectives;
pub mod spectral;

pub mod fusion;
pub mod params;
pub mod pca;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete 64-bit tensor used by the pipeline.
pub type Tensor = tensor::Tensor<f64>;
/// Concrete 64-bit tape.
pub type Tape = tensor::tape::Tape<f64>;
/// Gradients of a 64-bit backward pass.
pub type Gradients = tensor::tape::Gradients<f64>;

pub use tensor::tape::{Activation, ParamId};
