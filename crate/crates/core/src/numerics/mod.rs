//! Dense numerics, reverse-mode autodiff and gradient checking.

pub mod gradcheck;
mod matrix;
mod params;
mod rng;
mod sparse;
pub mod special;
pub mod tape;

pub use gradcheck::{finite_difference_check, GradCheck};
pub use matrix::Matrix;
pub use params::{glorot_uniform, Initializer, ParamId, ParamStore};
pub use rng::Rng;
pub use sparse::Csr;
pub use special::{coefficient_of_variation, masked_softmax, normal_cdf, softplus};
pub use tape::{FlopSite, Gradients, Tape, Var};
