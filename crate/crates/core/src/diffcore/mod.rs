//! Reverse-mode differentiation, layers, mixture-of-logistics heads and Adam.

mod graph;
pub mod layers;
pub mod mol;
mod params;
mod tensor;

use thiserror::Error;

pub use graph::{ConvGeom, Graph, Var};
pub use mol::{mol_logprob, mol_sample, MixtureOfLogistics};
pub use params::{adam_step, AdamConfig, Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
}

/// `[sin(2^l pi x), cos(2^l pi x)]` for `l = 0..frequencies`, interleaved.
pub fn sincos_encode(x: f64, frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * frequencies);
    sincos_encode_into(x, frequencies, &mut out);
    out
}

pub fn sincos_encode_into(x: f64, frequencies: usize, out: &mut Vec<f64>) {
    let mut w = std::f64::consts::PI;
    for _ in 0..frequencies {
        let (s, c) = (w * x).sin_cos();
        out.push(s);
        out.push(c);
        w *= 2.0;
    }
}
