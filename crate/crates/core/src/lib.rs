//! RAMiT image restoration: window and channel self-attention run side by side and mixed.
//!
//! The crate is self-contained: a small deterministic tensor library with
//! reverse-mode autodiff ([`tensor`], [`autograd`]), the bi-dimensional
//! attention core ([`attention`]), convolutional glue ([`layers`]), the
//! assembled model with analytic cost accounting ([`model`]), and the
//! data/training pipeline ([`pipeline`]).

pub mod attention;
pub mod autograd;
pub mod cli;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::{Element, Tensor, TensorError};
