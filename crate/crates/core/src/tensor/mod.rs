//! Minimal dense-tensor engine: values, a reverse-mode tape, Adam, a
//! finite-difference checker and a checkpoint container.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod scalar;
#[allow(clippy::module_inception)]
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_container, write_container, CheckpointHeader, GroupEntry, CHECKPOINT_FORMAT};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub(crate) use graph::softmax_in_place;
pub use graph::{CustomOp, Gradients, Graph, Mode, Var};
pub use params::{ParamGroup, ParamId, Params};
pub use scalar::Scalar;
pub(crate) use scalar::{gemm, Trans};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward already ran on this graph; build a new forward pass")]
    BackwardTwice,
    #[error("no gradient for parameter group {0}")]
    MissingGrad(String),
    #[error("parameter layout mismatch: {0}")]
    ParamLayout(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
