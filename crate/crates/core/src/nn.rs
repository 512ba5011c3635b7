//! Small building blocks shared by every module.

use nighttrack_autograd::{Graph, Var};

use crate::error::{CoreError, Result};
use crate::params::{Forward, Init, ParamId};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = init.glorot(&format!("{name}.weight"), in_dim, out_dim);
        let bias = bias.then(|| init.constant(&format!("{name}.bias"), &[out_dim], 0.0, true));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x · W + b` over the last axis of `x`.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.p(self.weight);
        let y = f.g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = f.p(b);
                Ok(f.g.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0, true),
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0, true),
            eps,
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gamma = f.p(self.gamma);
        let beta = f.p(self.beta);
        Ok(f.g.layer_norm(x, gamma, beta, self.eps)?)
    }
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), in_dim, hidden, true),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, out_dim, true),
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(f, x)?;
        let h = f.g.gelu(h);
        self.fc2.forward(f, h)
    }
}

/// `softmax(q·kᵀ / sqrt(d))` over the key axis for `[.., Nq, d]` and `[.., Nk, d]`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let d = *g.shape(q).last().expect("rank >= 1") as f64;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / d.sqrt());
    let axis = g.shape(logits).len() - 1;
    Ok(g.softmax(logits, axis)?)
}

/// Split the channel axis of `[.., N, D]` into `heads` contiguous chunks.
pub fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Vec<Var>> {
    let shape = g.shape(x).to_vec();
    let d = *shape.last().expect("rank >= 1");
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(CoreError::config(format!("dimension {d} is not divisible by {heads} heads")));
    }
    Ok(g.split(x, shape.len() - 1, &vec![d / heads; heads])?)
}

pub fn merge_heads(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let axis = g.shape(parts[0]).len() - 1;
    Ok(g.concat(parts, axis)?)
}
