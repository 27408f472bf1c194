//! Weakly-supervised anomaly detection with a vector-quantized autoencoder.
//!
//! The model is trained on normal (empty) tiles only. At inference two
//! evidences are computed per tile: an SSIM-based reconstruction map and a
//! latent alignment map built from quantization residuals. The alignment map
//! marks which connected components of the thresholded SSIM map to keep
//! (hysteresis double thresholding), and the kept components become
//! detection boxes.

pub mod detect;
pub mod error;
pub mod fusion;
pub mod io;
pub mod maps;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod trainer;

pub use error::{Result, VqadError};
pub use raster::{BinaryMask, GrayMap, ImageTile};
