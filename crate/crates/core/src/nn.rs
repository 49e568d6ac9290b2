//! Layer building blocks shared by the tokenizer and the CAR transformer.
//! Parameters live in a [`ParamStore`]; layers hold slot indices and read the
//! bound [`Var`]s at forward time.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Affine map `x W + b` over rows; `W` is `[in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.push(
            format!("{name}.w"),
            Tensor::uniform(&[fan_in, fan_out], bound, rng),
        );
        let bias = store.push(format!("{name}.b"), Tensor::uniform(&[fan_out], bound, rng));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let y = tape.matmul(x, vars[self.weight])?;
        let b = tape.expand(vars[self.bias], rows)?;
        tape.add(y, b)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Layer norm over the last axis with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.push(format!("{name}.g"), Tensor::full(&[dim], 1.0)),
            bias: store.push(format!("{name}.b"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let n = tape.layer_norm(x, LN_EPS)?;
        let g = tape.expand(vars[self.gain], rows)?;
        let b = tape.expand(vars[self.bias], rows)?;
        let scaled = tape.mul(n, g)?;
        tape.add(scaled, b)
    }
}

/// Pre-norm residual MLP block: `x + W2 gelu(W1 ln(x))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualMlp {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl ResidualMlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        ResidualMlp {
            norm: LayerNorm::new(store, &format!("{name}.ln"), dim),
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, vars, x)?;
        let h = self.up.forward(tape, vars, h)?;
        let h = tape.gelu(h)?;
        let h = self.down.forward(tape, vars, h)?;
        tape.add(x, h)
    }
}
