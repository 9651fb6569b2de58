//! Accuracy estimation for classifiers on unlabeled, covariate-shifted test
//! sets: confidence-based estimators (ATC, DoC, COT, GDE), nearest-neighbour
//! distance checks that drop test samples far from the training support, and
//! the evaluation protocol used to compare estimators.

pub mod acceptance;
pub mod bundle;
pub mod calibration;
pub mod cli;
pub mod combined;
pub mod confidence;
pub mod distance;
pub mod error;
pub mod eval;
mod fsutil;
pub mod ot;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
