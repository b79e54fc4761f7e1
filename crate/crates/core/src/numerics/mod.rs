//! Dense linear algebra, activations, normalization, positional encoding, seeded
//! random streams and the reverse-mode tape used by every network in the crate.

mod mat;
pub mod ops;
mod rng;
pub mod tape;

pub use mat::RealMat;
pub use ops::{
    argmax, canonical_sum, layer_norm, layer_norm_rows, positional_encoding, softmax_rows,
    ConvGeom, LAYER_NORM_EPS,
};
pub use rng::SeededRng;
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("positional encoding width must be even and non-zero, got {0}")]
    OddEncodingDim(usize),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("{context}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("loss must be a 1x1 scalar, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("invalid convolution geometry: {0}")]
    InvalidGeometry(String),
}
