//! Patch attention and attention embedding for semantic segmentation of
//! aerial imagery, on a small reverse-mode autodiff engine.
//!
//! The crate is layered bottom-up: [`tensor`] and [`kernels`] hold the dense
//! arithmetic, [`graph`] records it for differentiation, [`attention`] and
//! [`network`] build the model, and [`train`], [`infer`] and [`metrics`]
//! run it. [`data`] generates and stores the synthetic benchmark.

// `!(x > 0.0)` is deliberate wherever NaN must be rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod init;
pub mod kernels;
pub mod label;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod train;

pub use attention::{AemConfig, AemParams, PamConfig, PamParams};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{DatasetManifest, RasterSample, Split};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use infer::TileOptions;
pub use label::{LabelMap, CLASS_NAMES, NUM_CLASSES, PALETTE};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use network::{ArchConfig, ModelParams, Variant};
pub use tensor::{Scalar, Shape, Tensor};
pub use train::TrainHyper;
