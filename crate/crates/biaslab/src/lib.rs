//! Bias laboratory: train a small classifier on a synthetic, deliberately
//! biased dataset, surface the planted biases with global explanations,
//! quantify them with counterfactual bias insertion, and mitigate them with
//! targeted data augmentation or attribution-feedback fine-tuning.

pub mod attribution;
pub mod autodiff;
pub mod cbi;
pub mod clustering;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod gebi;
pub mod image;
pub(crate) mod linalg;
pub mod mitigation;
pub mod model;
pub mod rng;
pub mod stylemix;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
