//! Multi-modal deep transformation models for binary outcomes.
//!
//! The crate combines a scalar or CNN-computed intercept with an
//! interpretable linear shift on tabular features, trains ensembles of such
//! models, evaluates them under stratified cross-validation, and explains the
//! image part with Grad-CAM and occlusion maps.
//!
//! Module map:
//!
//! - [`tensor`], [`nn`], [`resample`]: dense tensors, a small 3D CNN with a
//!   reverse pass, and trilinear upsampling.
//! - [`model`]: transformation models, outcome probabilities, NLL,
//!   coefficient reports.
//! - [`train`]: member training, ensembles and weight tuning, model files.
//! - [`eval`]: folds, metrics, confidence intervals, thresholds and the
//!   cross-validation driver.
//! - [`xai`]: Grad-CAM, occlusion, map averaging and projections.
//! - [`embed`]: map features and exact t-SNE with CSV/HTML export.
//! - [`data`]: volume format, tabular encoding, synthetic datasets.

pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod nn;
pub mod optim;
pub mod resample;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod xai;

pub use error::{Error, Result};
pub use model::{Label, OutcomeDistribution, TransformationModel, Variant};
pub use nn::{Layer, NetworkSpec, Params};
pub use tensor::Tensor;
pub use train::{EnsembleModel, TrainConfig};
