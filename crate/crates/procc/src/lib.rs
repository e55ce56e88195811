//! Mutually conditioned primitive classifiers for open-world compositional
//! recognition.
//!
//! Two primitive classifiers (states and objects) run over shared feature
//! embeddings; learnable cross-primitive compatibility modules condition each
//! branch's prediction on the other branch's representation. Training is a
//! three-stage progressive schedule with per-stage parameter scopes, and
//! evaluation follows the open-world protocol: a calibration-bias sweep over
//! seen/unseen compositions reporting best seen/unseen accuracy, best
//! harmonic mean, and AUC.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use tensor::{Axis, KernelError, Tensor2};
