//! Tensor primitives with exact gradients and the encoder-decoder segmenter.

pub mod ops;
pub mod params;
pub mod segmenter;

pub use ops::MergeMode;
pub use params::{Param, ParamSet, Tag};
pub use segmenter::{init_params, NetConfig, Segmenter, Trace};
