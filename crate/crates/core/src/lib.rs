//! Two-stage instance segmentation with a supervised semantic attention
//! module over the feature pyramid and a multi-scale, deeply supervised mask
//! branch, plus the data, evaluation and training plumbing around it.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training speed,
//! `f64` for gradient checks); the aliases below pin the common choices.

pub mod config;
pub mod dataio;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fpn;
pub mod geometry;
pub mod gradcheck;
pub mod mask;
pub mod nn;
pub mod params;
pub mod scmb;
pub mod sea;
pub mod supervision;

pub use seascn_tensor::{Graph, Scalar, Tensor, Var};

pub use config::{ModelConfig, RunConfig};
pub use detector::{train_step, DetectionResult, Detector, JointLossReport, Sample, Sgd};
pub use error::{Error, Result};
pub use fpn::{FeaturePyramid, ImageTensor};
pub use geometry::{iou_box, BBox};
pub use mask::BinaryMask;
pub use params::ParamStore;
pub use sea::SeaModule;
pub use scmb::Scmb;
pub use supervision::{InstanceAnnotation, SemanticLabelMap};

pub type Detector32 = Detector<f32>;
pub type Detector64 = Detector<f64>;
pub type Sample32 = Sample<f32>;
pub type Sample64 = Sample<f64>;
pub type ImageTensor32 = ImageTensor<f32>;
pub type ImageTensor64 = ImageTensor<f64>;
pub type FeaturePyramid32 = FeaturePyramid<f32>;
pub type FeaturePyramid64 = FeaturePyramid<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
