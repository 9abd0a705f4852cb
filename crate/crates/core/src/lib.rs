//! Multimodal out-of-band beam selection for vehicular mmWave links.
//!
//! The pipeline: [`scene`] builds a roadside world and its raw sensor views,
//! [`channel`] derives the per-beam-pair power and the optimal pair,
//! [`preprocess`] turns LiDAR and camera data into model inputs, [`neural`]
//! fuses the modalities into a score per beam pair, [`topk`] picks how many of
//! the top beams to sweep, [`latency`] accounts for the time it all costs and
//! [`metrics`] scores the outcome. [`harness`] ties them into reproducible runs.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod channel;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod latency;
pub mod metrics;
pub mod neural;
pub mod preprocess;
pub mod rng;
pub mod scene;
pub mod topk;

pub use channel::{Codebook, ChannelMatrix, PathSet, PowerMatrix};
pub use error::{Error, Result};
pub use neural::{LatentEmbedding, Modality, ModelSpec, Parameters, ScoreVector, Tensor, TrainConfig};
pub use preprocess::{BitMap, RefinedBitMap, VoxelGrid, VoxelSpec};
pub use scene::{GpsReading, PointCloud, Scene, SceneConfig, SceneImage, VehicleInstance, VehicleType};
pub use topk::{BeamSubset, EmpiricalTables, KSelectionConfig};
