//! Synthetic local-SAR ground truth and U-Net SAR map prediction.

pub mod config;
pub mod dataset;
pub mod emfield;
pub mod evaluate;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod raster;
pub mod sarmap;
