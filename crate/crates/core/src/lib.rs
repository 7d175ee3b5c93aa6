//! Saliency-reliability auditing over a from-scratch CNN engine.
//!
//! The crate builds convolutional models that are provably blind to a
//! bottom band of the input (the *dead zone*), implements the usual
//! CAM-style explanation methods with exact reverse-mode gradients, and
//! measures how much saliency mass each method places inside the region the
//! model cannot see. A Monte-Carlo module verifies the closed-form expected
//! lower bound on GradCAM scores at initialization.

pub mod cam;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod testkit;
pub mod theory;
pub mod train;

pub use cam::{CamMethod, OptiCamOptions, SaliencyMap};
pub use error::{Error, Result};
pub use model::{DeadZone, InitScheme, MaskSpec, MiniVggConfig, Model, ModelMConfig, ModelSpec};
pub use nn::{ConvFilterBank, DenseLayer, ForwardTrace, PoolRouting};
pub use report::AuditReport;
pub use tensor::Tensor;
pub use theory::{McEstimate, BoundReport};
pub use train::{TrainConfig, TrainLog};
