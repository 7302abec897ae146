//! AGGRNet: adaptive-threshold feature segregation (FEM), contrast-based
//! cross-attention aggregation (FAM), the channel-attention C2PCA block, and
//! the surrounding backbone, trainer, data and metric tooling.

pub mod ablation;
pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod fea;
pub mod metrics;
pub mod model;
pub mod params;
pub mod train;
pub mod verify;

pub use aggrnet_tensor as tensor;
pub use error::{Error, Result};
