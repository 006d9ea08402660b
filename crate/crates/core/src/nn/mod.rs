//! Numerical kernels: matrix type, GRU with BPTT, dense/softmax head,
//! max-pooling-over-time, dropout, Adam and a finite-difference checker.
//!
//! Everything here is plain `f64`, single-threaded and deterministic; no
//! general autodiff, just the layers this model needs with hand-derived
//! gradients.

mod adam;
mod gradcheck;
pub mod gru;
pub mod layers;
pub mod mat;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::finite_difference_check;
pub use gru::{
    gru_cell_forward, gru_forward, gru_layer_forward, gru_stack_backward, gru_stack_forward,
    GruLayerParams, GruStackTrace,
};
pub use layers::{
    cross_entropy, dense_forward, dense_softmax_forward, dropout, max_pool_backward,
    max_pool_over_time, max_pool_with_argmax, softmax, DenseParams, DropoutMask, Mode, PROB_FLOOR,
};
pub use mat::Mat;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("sequence must contain at least one time step")]
    EmptySequence,
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidDropoutRate(f64),
    #[error("non-finite gradient at flat parameter index {index}")]
    NonFiniteGradient { index: usize },
}
