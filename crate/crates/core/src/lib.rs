//! Adversarial attacks on monocular depth estimation at desk scale.
//!
//! The crate bundles everything needed to study per-image (FGSM, I-FGSM,
//! MI-FGSM; non-targeted and object-targeted) and universal (single- and
//! multi-task) attacks against small, genuinely trained depth and
//! segmentation networks:
//!
//! * [`autodiff`]: reverse-mode differentiation over a fixed primitive set.
//! * [`models`]: the toy networks, their SGD trainer and checkpoints.
//! * [`attacks`]: per-image signed-gradient attacks.
//! * [`universal`]: image-agnostic perturbation training.
//! * [`metrics`]: RMSE, masked mean depth and distortion ratios.
//! * [`data`]: procedural scenes and Netpbm/PFM I/O.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod universal;

pub use error::{Error, Result};
pub use tensor::Tensor;
