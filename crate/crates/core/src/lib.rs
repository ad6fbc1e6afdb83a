//! A recurrent marked temporal point process over check-in sequences with
//! log-normal normalizing-flow heads for inter-event times and travel
//! distances, and a flow-parameter transfer path from a data-rich origin
//! region to a data-scarce target region.
//!
//! Pipeline: [`seqdata`] ingests raw check-ins into normalized per-user
//! sequences; [`clusters`] routes sequences to median-time clusters;
//! [`mtpp`]/[`flows`] define the model; [`grad`] computes exact gradients
//! (with a finite-difference oracle); [`train`] runs Adam with early stopping
//! and writes checkpoints; [`transfer`] wires origin anchors into a target
//! model; [`eval`] produces next-event predictions, MAE/MPA and report CSVs;
//! [`synth`] generates closed-form ground-truth data for testing.
//!
//! Every stochastic choice is keyed by explicit integer seeds, and all
//! reductions run in fixed order, so results are bit-reproducible for any
//! thread count.

pub mod clusters;
pub mod error;
pub mod eval;
pub mod flows;
pub mod grad;
pub mod linalg;
pub mod mtpp;
pub mod rng;
pub mod seqdata;
pub mod synth;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
