//! Posterior behavioral cloning.
//!
//! Tabular estimators and coverage metrics, the constructions that exhibit
//! behavioral cloning's coverage failure, Gaussian posterior sampling,
//! ensemble posterior-covariance estimation, diffusion-policy pretraining
//! (BC, σ-BC and PostBC) and Best-of-N finetuning on small continuous
//! environments.

pub mod constructions;
pub mod continuous;
pub mod diffusion;
pub mod ensemble;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod finetune;
pub mod gaussian;
pub mod linalg;
pub mod mdp;
pub mod nn;
pub mod report;
pub mod rng;
pub mod stats;
pub mod toy_env;

pub use error::{Error, Result};
