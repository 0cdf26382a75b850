//! Reduced-reference quality assessment for super-resolved images.
//!
//! A perception branch scores the SR image on its own; a fidelity branch
//! scores the feature-space difference between the SR image and its
//! upsampled LR source. Both branches fuse ViT (global) and ResNet (local)
//! features, condition on the scale factor, and pool patch scores with
//! learned patch weights.

pub mod backbones;
pub mod config;
pub mod data;
pub mod datamodel;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod regression;
pub mod trainer;

pub use config::ExperimentConfig;
pub use datamodel::{BranchFeatures, BranchTag, FeatureBundle, Map2d, QualityPrediction, RgbImage, Sample};
pub use error::{ErrorClass, PfiqaError, Result};
pub use model::Pfiqa;
