//! Soft labels from crowd annotations.
//!
//! The crate turns sparse `(item, annotator, label)` records into per-item
//! probability distributions through several *views* (vote normalization,
//! Dawid-Skene and MACE posteriors), combines those views into a single soft
//! label (averaging, Jensen-Shannon centroid, temperature scaling, hybrid),
//! distills the result into a linear softmax classifier and scores
//! predictions with macro-F1 and calibrated log-likelihood.
//!
//! All probabilities are in nats. Every routine is a pure function of its
//! inputs (and of an explicit seed where randomness is involved).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod annotations;
pub mod annotator_models;
pub mod distill;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
