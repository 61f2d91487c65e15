//! Unsupervised image segmentation by self-training a small network on a
//! single image, with a dynamic balance between feature similarity and
//! spatial continuity.

pub mod backbones;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod label_io;
pub mod loss;
pub mod silhouette;
pub mod trainer;
pub mod types;

pub use config::{MuSchedule, RunConfig};
pub use error::{Error, Result};
pub use types::{argmax_labels, normalize_response, seed_all, ImageTensor, LabelMap, ResponseMap};
