//! Numeric core: dense arrays with reverse-mode differentiation, parameter
//! storage, basic layers and a finite-difference gradient verifier.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Forward, ForwardState, Linear, Mlp, ParamId, ParamStore, Parameter};
pub use tape::{softmax_array, Array, Precision, Tape, TensorError, TensorResult, Var};

/// Build an array of the given shape from row-major data.
pub fn array(shape: &[usize], data: Vec<f64>) -> Array {
    Array::from_shape_vec(ndarray::IxDyn(shape), data).expect("data length matches shape")
}

#[cfg(test)]
mod tests;
