//! Weakly supervised segmentation seeds from a shifted-window transformer:
//! encoder, CAM head, hierarchical fusion, prototype refinement, losses,
//! synthetic data, training and evaluation.

pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hff;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod refine;
pub mod train;

pub use config::{Mode, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
