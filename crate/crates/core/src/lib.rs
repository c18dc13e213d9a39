pub mod archive;
pub mod assignment;
pub mod baselines;
pub mod body_model;
pub mod config;
pub mod error;
pub mod feature_image;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod params;
pub mod regressor;
pub mod synthetic_data;
pub mod training;
pub mod vit_encoder;

pub use error::{Error, Result};
