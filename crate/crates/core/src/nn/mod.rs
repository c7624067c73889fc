//! A small 3D encoder-decoder segmentation network with explicit dropout sites.

pub mod backbone;
pub mod ops;
pub mod params;
pub mod tensor;

pub use backbone::{softmax, softmax_backward, Backbone, ForwardMode, NetConfig, Tape};
pub use params::{load_params, read_param_manifest, save_params, Fingerprint, Param, ParamManifest, ParamSet};
pub use tensor::Tensor;
