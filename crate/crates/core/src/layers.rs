//! Parameter registration and the shared linear layer.

use crate::error::Result;
use crate::numcore::{init_uniform, Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Registers parameters in call order, drawing initial values from one
/// seeded stream.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<'b>(&'b mut self, name: &str) -> ParamBuilder<'b> {
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}{name}.", self.prefix),
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = init_uniform(shape, fan_in, self.rng);
        self.store.register(format!("{}{name}", self.prefix), t)
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.register(format!("{}{name}", self.prefix), value)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let mut s = self.scoped(name);
        Linear {
            weight: s.uniform("weight", &[fan_in, fan_out], fan_in),
            bias: s.uniform("bias", &[fan_out], fan_in),
            fan_in,
            fan_out,
        }
    }
}

/// `y = x · W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Per-forward state: training flag and the dropout stream.
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub rng: &'a mut Rng,
}
