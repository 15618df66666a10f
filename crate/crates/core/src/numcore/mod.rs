//! Tensor algebra, reverse-mode differentiation, optimizer and losses.

mod adam;
mod dft;
mod gradcheck;
mod graph;
mod ops;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use dft::{dft, dft_real, idft_real};
pub use gradcheck::{grad_check, grad_check_params, max_rel_error};
pub use graph::{BackwardFn, Graph, ParamId, ParamStore, Var};
pub use ops::{mae, matmul_tensors, mse, softmax_tensor};
pub use rng::Rng;
pub use tensor::Tensor;

pub use num_complex::Complex64;

/// Uniform `±sqrt(1/fan_in)` initialization.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound))
}
