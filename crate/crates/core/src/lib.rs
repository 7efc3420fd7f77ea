//! Desk-scale laboratory for contrastive representation learning and
//! transfer evaluation.
//!
//! Five pretraining objectives (cross-entropy, momentum-queue self-supervised
//! contrastive, supervised contrastive, and the two dual-head joint
//! objectives) train a staged dense encoder on synthetic source images. The
//! learned encoders are then scored on synthetic target domains with a
//! frozen-feature linear probe, full fine-tuning and episodic few-shot
//! logistic regression, and inspected with linear CKA, calibration,
//! class-separation, corruption and PGD analyses.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objectives;

mod error;
pub use error::{LabError, Result};
