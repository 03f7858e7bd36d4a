//! Query-propagation 3D multi-object tracking trained with hybrid supervision.
//!
//! The crate bundles everything needed to train and evaluate a desk-scale
//! tracker on synthetic bird's-eye-view scenes:
//!
//! * [`numcore`]: dense f64 tensors, a reverse-mode tape, parameter storage
//!   with aliasing, AdamW and checkpoints.
//! * [`simworld`]: synthetic scenes with identities, ego motion and token fields.
//! * [`decoder`]: the standard decoder (self-attention + cross-attention + FFN)
//!   and its self-attention-free twin sharing every other weight.
//! * [`assigner`], [`association`], [`loss`]: label assignment, query
//!   association and the clip loss.
//! * [`tracker`]: lifecycle engine for training clips and inference.
//! * [`metrics`]: CLEAR-MOT, AMOTA/AMOTP and center-distance mAP.
//! * [`gradcheck`]: finite-difference suites over ops, losses and a micro clip.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod assigner;
pub mod association;
pub mod decoder;
pub mod encoding;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod numcore;
pub mod simworld;
pub mod tracker;

pub use error::{Error, Result};
