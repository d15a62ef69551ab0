//! Minimal neural-network toolkit: reverse-mode autodiff, parameter storage,
//! dense and 1-D convolution layers, and Adam.

mod adam;
mod graph;
mod layers;
mod params;

pub use adam::Adam;
pub use graph::{conv_out_len, softmax_rows, Grads, Graph, Var};
pub use layers::{Conv1d, Linear};
pub use params::{ParamId, ParamSpec, ParamStore};
