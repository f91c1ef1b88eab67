//! Conjoint spatio-temporal graph forecasting.

pub mod config;
pub mod dataset_io;
pub mod decoder_attention;
pub mod encoder_posterior;
pub mod encoder_prior;
pub mod error;
pub mod evaluation;
pub mod het_graph;
pub mod matrix;
pub mod model;
pub mod params;
pub mod tape;
pub mod training;

pub use config::{Component, TrainConfig};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{Model, ModelParams};
pub use training::{Checkpoint, Trainer};
