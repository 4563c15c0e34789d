//! Multilayer perceptrons over a flat parameter vector, reverse-mode
//! gradients and Adam.

mod adam;
mod gemm;
mod mlp;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{Activation, Matrix, Mlp, OutputTransform, Tape, STD_FLOOR};
pub use params::{NamedSlice, ParamSet};
