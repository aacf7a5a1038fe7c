//! Target-aware transfer learning for skin-attribute segmentation.
//!
//! The pipeline trains an attribute-agnostic segmenter on the union of all
//! attribute masks, copies its weights into one segmenter per attribute, and
//! fine-tunes each on its own mask (optionally with a frozen encoder). A
//! stability-based score compares candidate initializations.

pub mod data;
pub mod error;
pub mod io;
pub mod losses;
pub mod maskops;
pub mod metrics;
pub mod nnet;
pub mod stability;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::TensorF;
