//! Pre-norm transformer blocks over the global token sequence, with the
//! key-token gate correcting each head's attended values.

use std::ops::Range;

use nighttrack_autograd::{Tensor, Var};

use crate::aktg::{attention_correction, Aktg};
use crate::config::{CorrectionAxis, ModelConfig};
use crate::error::{CoreError, Result};
use crate::nn::{attention_weights, merge_heads, split_heads, LayerNorm, Linear, Mlp};
use crate::params::{Forward, Init};

#[derive(Debug, Clone)]
pub struct Block {
    pub index: usize,
    pub norm1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub aktg: Option<Aktg>,
    pub heads: usize,
}

/// Output of one block plus per-head attention and activation maps.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub tokens: Var,
    pub attention: Vec<Var>,
    pub maps: Vec<Option<Var>>,
}

impl Block {
    pub fn new(init: &mut Init<'_>, index: usize, cfg: &ModelConfig) -> Self {
        let name = format!("blocks.{index}");
        let d = cfg.dim;
        let aktg = cfg
            .aktg_in_block(index)
            .then(|| Aktg::new(init, &format!("{name}.aktg"), cfg.head_dim(), cfg.aktg.clone()));
        Self {
            index,
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), d, cfg.norm_eps),
            wq: Linear::new(init, &format!("{name}.attn.wq"), d, d, true),
            wk: Linear::new(init, &format!("{name}.attn.wk"), d, d, true),
            wv: Linear::new(init, &format!("{name}.attn.wv"), d, d, true),
            proj: Linear::new(init, &format!("{name}.attn.proj"), d, d, true),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), d, cfg.norm_eps),
            mlp: Mlp::new(init, &format!("{name}.mlp"), d, d * cfg.mlp_ratio, d),
            aktg,
            heads: cfg.heads,
        }
    }

    /// `x: [.., N, D]`. The gate reads the block input split by heads; a map
    /// override on the forward context replaces the gate output by a constant.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<BlockOutput> {
        self.forward_rows(f, x, None)
    }

    /// Like [`Block::forward`] but only the token rows in `rows` are used as
    /// queries, so the output holds just those rows. Keys and values still
    /// cover every token; the result equals the same rows of the full output.
    pub fn forward_rows(&self, f: &mut Forward<'_>, x: Var, rows: Option<Range<usize>>) -> Result<BlockOutput> {
        let shape = f.g.shape(x).to_vec();
        if shape.last() != Some(&self.wq.in_dim) {
            return Err(CoreError::shape(format!(
                "block {} expects dimension {}, got {shape:?}",
                self.index, self.wq.in_dim
            )));
        }
        let h = self.norm1.forward(f, x)?;
        let axis = shape.len() - 2;
        let (xq, hq) = match &rows {
            Some(r) => (f.g.slice(x, axis, r.start, r.len())?, f.g.slice(h, axis, r.start, r.len())?),
            None => (x, h),
        };
        let q = self.wq.forward(f, hq)?;
        let k = self.wk.forward(f, h)?;
        let v = self.wv.forward(f, h)?;
        let qs = split_heads(&mut f.g, q, self.heads)?;
        let ks = split_heads(&mut f.g, k, self.heads)?;
        let vs = split_heads(&mut f.g, v, self.heads)?;
        let gate_in = match self.aktg {
            Some(_) if f.map_override.is_none() => Some(split_heads(&mut f.g, x, self.heads)?),
            _ => None,
        };
        let mut outs = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let a = attention_weights(&mut f.g, qs[i], ks[i])?;
            attention.push(a);
            let m = match (&self.aktg, f.map_override) {
                (None, _) => None,
                (Some(_), Some(c)) => {
                    let mut ms = f.g.shape(vs[i]).to_vec();
                    *ms.last_mut().unwrap() = 1;
                    Some(f.constant(Tensor::full(&ms, c)))
                }
                (Some(gate), None) => {
                    let fi = gate_in.as_ref().expect("gate input split")[i];
                    let stream = (self.index * 64 + i) as u64;
                    Some(gate.head_map(f, fi, stream)?)
                }
            };
            let out = match (m, &self.aktg) {
                (Some(m), Some(gate)) => {
                    let m_used = match (&rows, gate.cfg.correction) {
                        (Some(r), CorrectionAxis::Row) => f.g.slice(m, axis, r.start, r.len())?,
                        _ => m,
                    };
                    attention_correction(&mut f.g, a, m_used, vs[i], gate.cfg.correction)?
                }
                _ => f.g.matmul(a, vs[i])?,
            };
            maps.push(m);
            outs.push(out);
        }
        let merged = merge_heads(&mut f.g, &outs)?;
        let attn = self.proj.forward(f, merged)?;
        let x = f.g.add(xq, attn)?;
        let h = self.norm2.forward(f, x)?;
        let h = self.mlp.forward(f, h)?;
        let tokens = f.g.add(x, h)?;
        Ok(BlockOutput {
            tokens,
            attention,
            maps,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub blocks: Vec<Block>,
}

impl Backbone {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(CoreError::config("backbone depth must be at least 1"));
        }
        Ok(Self {
            blocks: (0..cfg.depth).map(|i| Block::new(init, i, cfg)).collect(),
        })
    }

    /// Run blocks `from..` sequentially and return every block's output.
    pub fn forward_from(&self, f: &mut Forward<'_>, x: Var, from: usize) -> Result<Vec<BlockOutput>> {
        let mut outs: Vec<BlockOutput> = Vec::with_capacity(self.blocks.len());
        let mut cur = x;
        for block in &self.blocks[from..] {
            let out = block.forward(f, cur)?;
            cur = out.tokens;
            outs.push(out);
        }
        Ok(outs)
    }

    /// Final tokens `f_f`.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let outs = self.forward_from(f, x, 0)?;
        Ok(outs.last().expect("depth >= 1").tokens)
    }
}

#[cfg(test)]
mod tests {
    use nighttrack_autograd::Tensor;

    use super::*;
    use crate::params::{Mode, ParamStore};

    fn tiny() -> (ParamStore, Backbone, ModelConfig) {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut Init::new(&mut store, 21), &cfg).unwrap();
        (store, bb, cfg)
    }

    fn tokens(n: usize, d: usize) -> Tensor {
        Tensor::from_fn(&[n, d], |i| ((i * 31 % 97) as f64 / 97.0 - 0.5) * 2.0)
    }

    #[test]
    fn token_count_preserved_and_eval_repeatable() {
        let (store, bb, cfg) = tiny();
        let run = || {
            let mut f = Forward::new(&store, Mode::Eval).without_grad();
            let x = f.constant(tokens(20, cfg.dim));
            let y = bb.forward(&mut f, x).unwrap();
            f.g.value(y).clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.shape(), &[20, cfg.dim]);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_mlp_output_makes_mlp_sublayer_identity() {
        let (mut store, bb, cfg) = tiny();
        let block = &bb.blocks[0];
        let (w, b) = (block.mlp.fc2.weight, block.mlp.fc2.bias.unwrap());
        store.set(w, Tensor::zeros(store.get(w).shape())).unwrap();
        store.set(b, Tensor::zeros(store.get(b).shape())).unwrap();
        let mut f = Forward::new(&store, Mode::Eval);
        let x = f.constant(tokens(10, cfg.dim));
        let out = block.forward(&mut f, x).unwrap();
        let n2 = block.norm2.forward(&mut f, out.tokens).unwrap();
        let m = block.mlp.forward(&mut f, n2).unwrap();
        assert!(f.g.data(m).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn restricted_rows_match_full_output() {
        for axis in [CorrectionAxis::Column, CorrectionAxis::Row] {
            let mut cfg = ModelConfig::tiny();
            cfg.aktg.correction = axis;
            let mut store = ParamStore::new();
            let bb = Backbone::new(&mut Init::new(&mut store, 4), &cfg).unwrap();
            let mut f = Forward::new(&store, Mode::Train).with_noise_seed(Some(9));
            let x = f.constant(tokens(12, cfg.dim));
            let full = bb.blocks[1].forward(&mut f, x).unwrap().tokens;
            let part = bb.blocks[1].forward_rows(&mut f, x, Some(3..8)).unwrap().tokens;
            assert_eq!(f.g.data(part), &f.g.data(full)[3 * cfg.dim..8 * cfg.dim], "{axis:?}");
        }
    }

    #[test]
    fn depth_zero_rejected() {
        let cfg = ModelConfig {
            depth: 0,
            ..ModelConfig::tiny()
        };
        let mut store = ParamStore::new();
        assert!(Backbone::new(&mut Init::new(&mut store, 1), &cfg).is_err());
    }
}
