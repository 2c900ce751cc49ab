//! Inference-time processing.
//!
//! * [`acs`]: the 16 audio-channel-swap transforms (x/y exchange and sign
//!   flips), applied consistently to audio, features, labels and outputs.
//! * [`overlap`]: median fusion of overlapping windows.
//! * [`ctai`]: per-class k-means over the tracks of rotation-augmented
//!   outputs after outlier rejection.

pub mod acs;
pub mod ctai;
pub mod kmeans;
pub mod overlap;

pub use acs::AcsTransform;
pub use ctai::{ctai, matched_mse, CtaiConfig, CtaiOutput};
pub use kmeans::{kmeans, KMeansConfig, KMeansResult};
pub use overlap::{inference_overlap, OverlapConfig, OverlapOutput};
