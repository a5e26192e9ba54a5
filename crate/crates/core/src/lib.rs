//! Recurrent cells with explicit long-range conditioning (ELC), 2D lattice
//! sweeps, the impact-vanishing experiment and a small scene-labeling model.

pub mod autograd;
pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod elc;
pub mod error;
pub mod files;
pub mod gradcheck;
pub mod impact;
pub mod lattice;
pub mod netpbm;
pub mod seg;
pub mod synth;
pub mod tensor;

pub use autograd::{Gradients, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
