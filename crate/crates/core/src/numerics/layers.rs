//! Parameterised building blocks shared by the contrastive and fusion models.

use rand::Rng;

use super::params::{glorot, Bound, ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::Result;

/// Affine map `x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet<f32>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), glorot(rng, in_dim, out_dim));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(y, p.var(self.bias))
    }
}

/// Layer normalisation over the last axis with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init(params: &mut ParamSet<f32>, name: &str, dim: usize) -> Self {
        let gain = params.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layernorm(x, p.var(self.gain), p.var(self.bias))
    }
}
