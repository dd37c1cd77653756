//! Dense tensors, a reverse-mode tape and the primitives the encoders and
//! losses are built from.

mod attention;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use attention::{
    multi_head_self_attention, multi_head_self_attention_composed, AttentionVars, LinearVars,
};
pub use gradcheck::grad_check;
pub use params::{ParamId, ParamStore};
pub use tape::{cosine_similarity, Gradients, Tape, Var, LAYER_NORM_EPS, MASK_NEG, NORM_EPS};
pub use tensor::{dot, norm, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("width {width} is not divisible by {heads} attention heads")]
    HeadCount { width: usize, heads: usize },
    #[error("expected a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("finite-difference step {0} outside [1e-6, 1e-4]")]
    InvalidStep(f64),
}
