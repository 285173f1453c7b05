//! Counterfactual gender debiasing for speech-based depression detection.

pub mod autodiff;
pub mod baselines;
pub mod backbones;
pub mod corpus;
pub mod counterfactual;
pub mod datamodel;
pub mod dsp;
pub mod error;
pub mod fairness;
pub mod gradcheck;
pub mod harness;
pub mod nn;

pub use error::{Error, Result};
