//! Unified local and global image features.
//!
//! A single convolutional backbone feeds three heads: a GeM-pooled,
//! whitened global descriptor; an attention scorer that picks keypoints on
//! the shallow feature map; and a 1x1-conv autoencoder that compresses the
//! shallow features into compact local descriptors. Retrieval runs a global
//! nearest-neighbour search and re-ranks the shortlist by RANSAC inlier counts
//! between local feature sets.

pub mod backbone;
pub mod benchmark;
pub mod checkpoint;
pub mod extractor;
pub mod heads;
pub mod losses;
pub mod matcher;
pub mod model;
pub mod numgraph;
pub mod retrieval;
pub mod trainer;

pub use model::{Model, ModelConfig, ModelError};
