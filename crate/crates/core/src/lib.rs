//! Sparse-patch event vision.
//!
//! Event streams are accumulated into voxel-grid frames, split into
//! non-overlapping patches, filtered by their active ratio and fed to a
//! vision transformer that accepts any number of patches. The crate also
//! carries an analytical FLOPs/MACs model that is checked against operation
//! counters threaded through the kernels, a toy-scale AdamW training loop and
//! a single-threaded throughput harness.

pub mod bench;
pub mod cost_model;
pub mod events_io;
pub mod nn_kernels;
pub mod patches;
pub mod train;
pub mod vit;
pub mod voxel;

pub use cost_model::{CostReport, CountingMode};
pub use events_io::{Event, EventRecording, Polarity, ShapeClass};
pub use nn_kernels::{OpCounter, Tensor2D};
pub use patches::{PatchGrid, PatchSet};
pub use train::{TrainConfig, ThresholdMode};
pub use vit::{ViTConfig, ViTParams, VisionTransformer};
pub use voxel::VoxelGrid;
