//! Field-level building blocks: rigid-motion parameterization, blended
//! region nets with softmax gating, per-layer parameter generators, and
//! landmark prediction heads.

pub mod blend;
pub mod hyper;
pub mod landmarks;
pub mod se3;

pub use blend::{blend_deform, blend_field, blend_weights, BlockOutput, BlockParams, BlockSpec};
pub use hyper::{
    hyper_generate, init_hypernet, zero_output_columns, HyperNetParams, HyperNetSpec,
    HyperNetTensors, HYPER_HIDDEN,
};
pub use landmarks::{predict_landmarks, LandmarkNetSpec};
pub use se3::{apply_deformation, se3_apply_graph, se3_exp, skew, SE3Param};
