//! Neuron localization workbench: a small transformer with tappable FFN
//! neurons, integrated-gradients locators, baseline locators, interventions
//! and the experiments that compare them.

pub mod artifact;
pub mod attribution;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod interventions;
pub mod metrics;
pub mod model;
pub mod neurons;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
