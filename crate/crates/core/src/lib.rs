//! Sound event localization and detection with a CST-former network.
//!
//! Pipeline: FoA audio → [`features`] → [`model`] → multi-ACCDOA output →
//! optional [`infertools`] post-processing → [`decode`] → [`evalmetrics`].
//! Training uses the permutation-invariant losses of [`objective`].

pub mod accdoa;
pub mod decode;
pub mod error;
pub mod evalmetrics;
pub mod features;
pub mod hungarian;
pub mod infertools;
pub mod model;
pub mod objective;

pub use accdoa::{Layout, MultiAccdoa};
pub use error::{CoreError, Result};
