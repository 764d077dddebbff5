//! Parameter bundles shared by branches, interaction units and merging.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// `y = x W + b`, `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.trunc_normal(vec![fan_in, fan_out], INIT_STD), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]), false);
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(vec![fan_in, fan_out]), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]), false);
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }

    pub fn num_params(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

/// Affine parameters of a LayerNorm / GroupNorm.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(vec![dim], 1.0), false);
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(vec![dim]), false);
        Norm { gain, shift }
    }

    pub fn layer_norm(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (a, b) = (g.param(self.gain), g.param(self.shift));
        g.layer_norm(x, a, b)
    }

    pub fn group_norm(&self, g: &mut Graph, x: Var, groups: usize) -> Result<Var> {
        let (a, b) = (g.param(self.gain), g.param(self.shift));
        g.group_norm(x, groups, a, b)
    }
}
