//! Masked vision-language pretraining with semantic soft targets and a
//! spectral alignment loss, at desk scale.
//!
//! * [`masking`] — random patch-token masking plans.
//! * [`encoders`] — mask-aware vision transformer and text transformer.
//! * [`loss`] — soft targets, cross-modal similarities, spectral loss and
//!   the combined objective.
//! * [`data`] — synthetic image/report corpus, entity extractor, disk format.
//! * [`train`], [`optim`], [`checkpoint`] — pretraining loop and state.
//! * [`eval`], [`ablate`] — zero-shot, linear probe, retrieval, ablations.
//! * [`gradcheck`] — finite-difference verification suite.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod masking;
pub mod optim;
pub mod rng;
pub mod train;
pub mod vocab;

pub use config::RunConfig;
pub use error::{Error, Result};
