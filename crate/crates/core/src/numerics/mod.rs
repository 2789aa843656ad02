//! Dense linear algebra, reverse-mode differentiation, seeded randomness and
//! optimization. Everything else in the crate is built on this module.

mod adam;
mod gradcheck;
mod init;
mod matrix;
mod params;
mod rng;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{analytic_grads, finite_difference_check, GradCheckReport, DEFAULT_FD_EPS};
pub use init::{glorot_bound, glorot_uniform_init};
pub use matrix::{cosine, dot, Matrix};
pub use params::{Gradients, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{sigmoid, softmax, NodeId, Tape, BCE_EPS};
