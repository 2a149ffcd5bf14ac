//! Dense linear algebra, layers with hand-written backward passes, elementary
//! losses, and a finite-difference gradient oracle.

mod fdiff;
mod layers;
mod loss;
mod matrix;

pub use fdiff::{finite_diff_grad, max_relative_error};
pub use layers::{linear_forward, relu, relu_backward, LayerCache, Linear, Mlp};
pub use loss::{mse, softmax, softmax_cross_entropy};
pub use matrix::Matrix;
