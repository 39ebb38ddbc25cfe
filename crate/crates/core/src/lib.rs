//! Robustness and feature-attribution evaluation for multi-label
//! instrument/verb/target triplet classifiers.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`graph`]: dense tensors and a small reverse-mode tape.
//! - [`triplet`]: the triplet label space and its component projections.
//! - [`model`]: the reference backbone / encoder / decoder classifier.
//! - [`datasets`]: synthetic scenes with core/spurious ground truth, a frames
//!   directory loader and video-level fold splitting.
//! - [`training`]: SGD and adversarial training loops.
//! - [`metrics`]: average precision per component family.
//! - [`explain`]: Grad, integrated gradients, CAM and top-fraction masks.
//! - [`robustness`]: minimum-norm masked attacks and robustness curves.
//! - [`report`]: CSV, SVG and manifest emission.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod datasets;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod par;
pub mod report;
pub mod robustness;
pub mod tensor;
pub mod training;
pub mod triplet;

pub use classifier::{Classifier, LinearClassifier};
pub use error::{Error, Result};
pub use mask::FeatureMask;
pub use tensor::Tensor;
