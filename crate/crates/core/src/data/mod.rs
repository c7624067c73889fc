//! Synthetic volumes, preprocessing, augmentation and two-stream batching.

pub mod batch;
pub mod dataset;
pub mod phantom;
pub mod transform;
pub mod volume;

pub use batch::{two_stream_batches, Batch, SamplerState, TwoStreamBatches, TwoStreamSampler};
pub use dataset::{DatasetDir, DatasetSplit, LabeledCase, LoadScope, Manifest, SplitSizes};
pub use phantom::{generate_phantom, PhantomConfig, PhantomGeometry};
pub use transform::{augment, normalize, random_crop, random_crop_volume, Transform};
pub use volume::{load_mask, load_volume, save_mask, save_volume, BinaryMask, Shape3, Volume, VolumeKind};
