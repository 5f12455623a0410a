//! White-box transformer built from unrolled optimization of a sparse
//! rate-reduction objective.
// `!(x > 0)` style checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocks;
pub mod diagnostics;
pub mod error;
pub mod gmm;
pub mod numeric;
pub mod rate;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use numeric::autodiff::{value_and_grad, Tape, Var};
pub use numeric::matrix::Matrix;
pub use numeric::rng::RngStream;
pub use scalar::Scalar;

pub type Mat64 = Matrix<f64>;
pub type Mat32 = Matrix<f32>;
pub type Tape64 = Tape<f64>;
