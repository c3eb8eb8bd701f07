//! Calibration estimators for the average treatment effect under
//! covariate-adaptive randomization.

pub mod design;
pub mod learners;
pub mod matrixkit;
pub mod rng;
pub mod calibration;
pub mod error;
pub mod proxy;
pub mod trial;
pub mod estimator;
pub mod inference;
pub mod recipe;
pub mod simharness;
pub mod dataio;
pub mod cli;
