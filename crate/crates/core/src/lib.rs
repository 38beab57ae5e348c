//! GRD-Net: a generative-reconstruction / discriminative-segmentation model
//! for ROI-constrained surface anomaly detection.

pub mod anomaly_synth;
pub mod config;
pub mod losses;
pub mod networks;
pub mod pipeline;
pub mod corpus;
pub mod dataset_io;
pub mod evaluation;
pub mod inference;
pub mod error;
pub mod raster;
pub mod smoke;
pub mod trainer;

pub use error::{Error, Result};
pub use grdnet_tensor as tensor;
pub use raster::{BinaryMask, Heatmap, Image, MaskMap, RoiMask};

pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type Heatmap32 = Heatmap<f32>;
pub type Heatmap64 = Heatmap<f64>;
