//! Minimal reverse-mode differentiation engine: tensors, a tape of backward
//! closures, the operator set the toy network needs, Adam, a finite
//! difference oracle, and the checkpoint format.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{finite_diff_check, GradCheckReport, DEFAULT_FD_STEP};
pub use ops::{
    add, conv2d, conv2d_transpose, discriminative_loss, relu, scale, softmax_cross_entropy,
    IGNORE_LABEL,
};
pub use tape::{Tape, VarId};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("all pixels are ignored; cross-entropy has no support")]
    EmptyLabelSet,
    #[error("instance map contains no instances")]
    NoInstances,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}
