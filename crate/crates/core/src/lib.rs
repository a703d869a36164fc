//! Hierarchical grid-graph landmark detection for left-ventricle
//! measurements on echocardiogram frames.
//!
//! The pipeline: a frame is turned into a hierarchy of patch grids plus a
//! pixel grid ([`graph`]); a CNN/U-Net backbone gives every node a feature
//! vector ([`backbone`]); graph convolutions and a sigmoid head produce
//! four-channel heatmaps at every level, and the pixel-level heatmaps are
//! decoded to sub-pixel landmark coordinates by soft-argmax ([`gnn`]).
//! Training combines class-weighted BCE on all levels with coordinate L2
//! ([`objective`], [`train`]).

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod gnn;
pub mod graph;
pub mod labels;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod objective;
pub mod par;
pub mod params;
pub mod train;

pub use error::{Error, Result};
pub use par::Exec;
