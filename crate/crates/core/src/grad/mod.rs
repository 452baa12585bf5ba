//! Dense tensors, a reverse-mode autodiff tape, initialization, weight
//! normalization and the optimizer.

mod graph;
pub mod gradcheck;
mod gru;
mod linalg;
mod optim;
mod param;
mod tensor;

use rand::Rng as _;
use rand::SeedableRng;
use thiserror::Error;

pub use graph::{Graph, Var};
pub use linalg::{gemm, MatRef};
pub use optim::{adam_step, noam_lr, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use param::{ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::{logsumexp, sigmoid};

/// Seedable generator used for every randomized operation.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("weight normalization direction row {row} has zero norm")]
    ZeroRowNorm { row: usize },
    #[error("{op} on an empty operand")]
    Empty { op: &'static str },
    #[error("learning-rate schedule is defined from step 1")]
    InvalidStep,
}

/// Uniform Glorot initialization for a `(fan_in, fan_out)` matrix.
pub fn xavier_init(shape: [usize; 2], rng: &mut Rng) -> Tensor {
    let [fan_in, fan_out] = shape;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(&shape, data).expect("shape matches data")
}

/// Effective row-wise weight-normalized matrix, evaluated outside a tape.
pub fn weight_norm_effective(direction: &Tensor, gain: &Tensor) -> Result<Tensor, GradError> {
    let mut g = Graph::new();
    let v = g.constant(direction.clone())?;
    let s = g.constant(gain.clone())?;
    let w = g.weight_norm(v, s)?;
    Ok(g.value(w).clone())
}
