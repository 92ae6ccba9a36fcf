//! Reverse-mode differentiable computation: tensors, the op tape with
//! second-order support, MLP building blocks, Adam, and checkpoint I/O.

pub mod checkpoint;
pub mod coef;
pub mod mlp;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use coef::{rot_coef, CoefKind};
pub use mlp::{
    encoded_width, init_mlp, linear_init, mlp_eval, mlp_forward, params_from_tensors,
    positional_encoding, positional_encoding_node, siren_bound, siren_init, Activation, MlpParams,
    MlpSpec,
};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use tape::{matmul, softmax_rows, Adjoints, NodeId, Op, Tape};
pub use tensor::Tensor;
