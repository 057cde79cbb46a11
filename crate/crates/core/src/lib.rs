//! Plausibility classification and ranking of clarifications in
//! instructional text, built on a replaced-token-detection discriminator.
//!
//! The pipeline: a small transformer encoder ([`backbone`]) is pre-trained
//! as an ELECTRA-style discriminator ([`rtd`]); its language-modelling head is
//! kept and fine-tuned together with span-pooled task heads ([`heads`],
//! [`training`]) on filled-in instances ([`data`]). Predictions from several
//! fine-tuned models are combined per pattern ([`ensemble`]) and scored with
//! accuracy and Spearman correlation ([`evaluation`]).
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to `f64`.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ensemble;
mod error;
pub mod evaluation;
pub mod heads;
pub mod model;
pub mod nn;
pub mod rng;
pub mod rtd;
mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type Gradients = tensor::Gradients<f64>;
pub type Encoder = backbone::Encoder<f64>;
pub type PretrainedHead = heads::PretrainedHead<f64>;
pub type TaskHead = heads::TaskHead<f64>;
pub type PlausibilityModel = model::PlausibilityModel<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;
pub type AdamW = training::AdamW<f64>;
