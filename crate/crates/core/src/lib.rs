//! Numerical building blocks for scientific machine learning: tensors, reverse-mode
//! differentiation, networks, optimizers, classical PDE solvers, physics-informed and operator
//! networks, neural ODEs and Wasserstein GANs.

pub mod autodiff;
pub mod convnet;
pub mod dynamics;
pub mod error;
pub mod generative;
pub mod nn;
pub mod operatornet;
pub mod optim;
pub mod pdesolve;
pub mod pinn;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
