use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            w: store.add_uniform(&format!("{name}.w"), &[output, input], input, rng),
            b: store.add_uniform(&format!("{name}.b"), &[output], input, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    /// Kernel 3 with padding 1; stride 1 keeps the length, stride 2 halves it
    /// (rounding up).
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = cin * 3;
        Self {
            w: store.add_uniform(&format!("{name}.w"), &[cout, cin, 3], fan_in, rng),
            b: store.add_uniform(&format!("{name}.b"), &[cout], fan_in, rng),
            stride,
            pad: 1,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.conv1d(x, w, b, self.stride, self.pad)
    }
}
