//! Deconfounded lexicon extraction toolkit.
//!
//! Trains text classifiers on peer-review corpora, explains them through
//! bag-of-words weights, attention pooling or a perturbation-based local
//! surrogate, residualises them against a natural-language confounder, and
//! scores the resulting lexicons with the informativeness coefficient. A
//! synthetic benchmark with planted causal structure verifies the whole
//! pipeline at desk scale.
//!
//! All numeric code is generic over the scalar type ([`Scalar`]); concrete
//! aliases below fix f32 for checkpoint-bearing pipeline models (stored as
//! float32 tensors, so save/load round-trips bit-exactly) and f64 for
//! estimators and verification.

pub mod classifiers;
pub mod corpus;
pub mod error;
pub mod explanations;
pub mod informativeness;
pub mod logistic;
pub mod nn;
pub mod residualisation;
pub mod scalar;
pub mod synthbench;
pub mod textrep;

pub use error::{CoreError, Result};
pub use scalar::Scalar;

/// Scalar for trained pipeline models; matches the float32 checkpoint format.
pub type PipelineFloat = f32;
/// Scalar for estimators, statistics and gradient verification.
pub type StatFloat = f64;

pub type ClassifierF32 = classifiers::Classifier<f32>;
pub type ClassifierF64 = classifiers::Classifier<f64>;
pub type TrainedModelF32 = classifiers::TrainedModel<f32>;
pub type TrainedModelF64 = classifiers::TrainedModel<f64>;
pub type DrModelF32 = residualisation::DrModel<f32>;
pub type DrModelF64 = residualisation::DrModel<f64>;
pub type DrTrainedF32 = residualisation::DrTrained<f32>;
pub type DrTrainedF64 = residualisation::DrTrained<f64>;
pub type LogisticFitF64 = logistic::LogisticFit<f64>;
