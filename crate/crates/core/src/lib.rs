//! Warping-based multi-scale stereo matching (ESNet / ESNet-M) on a small
//! reverse-mode automatic differentiation engine.
//!
//! Layout:
//!
//! - [`tensor`], [`graph`], [`gradcheck`], [`optim`], [`params`]: the dense
//!   tensor engine with tape-based autodiff, Adam and checkpoints.
//! - [`matching`]: correlation cost volumes, horizontal disparity warping,
//!   the feature matching module and its occlusion-aware variant.
//! - [`network`]: the ESNet / ESNet-M architectures.
//! - [`losses`]: supervised smooth-L1 and the photometric pretraining loss.
//! - [`data`]: PFM / KITTI readers, normalization, cropping, synthetic pairs
//!   and the dataset-scheduled trainer.
//! - [`metrics`]: EPE, D1 and diagnostic image exports.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
mod kernels;
pub mod matching;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use graph::{Graph, OpKind, ResizeMode, Var};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tensor::{Real, Shape, Tensor};
