//! Weakly supervised cancer evidence localization on pathology patches.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod explain;
pub mod imaging;
pub mod localize;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod wsi;

pub use error::{Error, Result};
