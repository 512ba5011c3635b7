//! Multiscale hierarchy blender: template fusion within each scale,
//! search-to-template alignment and assembly of the global token sequence.

use std::ops::Range;

use nighttrack_autograd::Var;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::nn::{attention_weights, merge_heads, split_heads, LayerNorm, Linear};
use crate::params::{Forward, Init};

/// Multi-head cross-attention. The first sequence supplies queries, the
/// second keys and values. With `residual` the block is
/// `q + Wo·attn(LN(q), LN(kv))`, otherwise the bare `Wo·attn(q, kv)`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub residual: bool,
}

impl CrossAttention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, residual: bool, eps: f64) -> Self {
        Self {
            norm_q: LayerNorm::new(init, &format!("{name}.norm_q"), dim, eps),
            norm_kv: LayerNorm::new(init, &format!("{name}.norm_kv"), dim, eps),
            wq: Linear::new(init, &format!("{name}.wq"), dim, dim, true),
            wk: Linear::new(init, &format!("{name}.wk"), dim, dim, true),
            wv: Linear::new(init, &format!("{name}.wv"), dim, dim, true),
            wo: Linear::new(init, &format!("{name}.wo"), dim, dim, true),
            heads,
            residual,
        }
    }

    /// `q: [.., Nq, D]`, `kv: [.., Nk, D]` → `[.., Nq, D]`.
    pub fn forward(&self, f: &mut Forward<'_>, q: Var, kv: Var) -> Result<Var> {
        let (dq, dkv) = (*f.g.shape(q).last().unwrap(), *f.g.shape(kv).last().unwrap());
        if dq != dkv || dq != self.wq.in_dim {
            return Err(CoreError::shape(format!(
                "cross-attention expects dimension {}, got query {dq} and key/value {dkv}",
                self.wq.in_dim
            )));
        }
        let (qn, kvn) = if self.residual {
            (self.norm_q.forward(f, q)?, self.norm_kv.forward(f, kv)?)
        } else {
            (q, kv)
        };
        let qp = self.wq.forward(f, qn)?;
        let kp = self.wk.forward(f, kvn)?;
        let vp = self.wv.forward(f, kvn)?;
        let qs = split_heads(&mut f.g, qp, self.heads)?;
        let ks = split_heads(&mut f.g, kp, self.heads)?;
        let vs = split_heads(&mut f.g, vp, self.heads)?;
        let mut outs = Vec::with_capacity(self.heads);
        for ((qi, ki), vi) in qs.into_iter().zip(ks).zip(vs) {
            let a = attention_weights(&mut f.g, qi, ki)?;
            outs.push(f.g.matmul(a, vi)?);
        }
        let merged = merge_heads(&mut f.g, &outs)?;
        let out = self.wo.forward(f, merged)?;
        if self.residual {
            Ok(f.g.add(q, out)?)
        } else {
            Ok(out)
        }
    }
}

/// Token ranges of every segment of the global sequence, in concatenation
/// order: search, overlapped search, static and dynamic template (initial),
/// static and dynamic template (overlapped).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    pub search: Range<usize>,
    pub search_overlapped: Range<usize>,
    pub static_template: Range<usize>,
    pub dynamic_template: Range<usize>,
    pub static_overlapped: Range<usize>,
    pub dynamic_overlapped: Range<usize>,
}

impl SegmentMap {
    pub fn new(search: usize, search_o: usize, template: usize, template_o: usize) -> Self {
        let mut at = 0;
        let mut next = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            search: next(search),
            search_overlapped: next(search_o),
            static_template: next(template),
            dynamic_template: next(template),
            static_overlapped: next(template_o),
            dynamic_overlapped: next(template_o),
        }
    }

    pub fn for_config(cfg: &ModelConfig) -> Self {
        let (s, t) = (cfg.search_grid(), cfg.template_grid());
        Self::new(s * s, (s - 1) * (s - 1), t * t, (t - 1) * (t - 1))
    }

    pub fn total(&self) -> usize {
        self.dynamic_overlapped.end
    }

    /// Slice one segment out of `[.., N, D]` tokens.
    pub fn take(&self, f: &mut Forward<'_>, tokens: Var, range: &Range<usize>) -> Result<Var> {
        let axis = f.g.shape(tokens).len() - 2;
        if f.g.shape(tokens)[axis] != self.total() {
            return Err(CoreError::shape(format!(
                "token count {} does not match segment map total {}",
                f.g.shape(tokens)[axis],
                self.total()
            )));
        }
        Ok(f.g.slice(tokens, axis, range.start, range.len())?)
    }

    /// Split `[.., N, D]` tokens into `(fR, fRo, fZ, fZo)`.
    pub fn partition(&self, f: &mut Forward<'_>, tokens: Var) -> Result<[Var; 4]> {
        let fr = self.take(f, tokens, &self.search)?;
        let fro = self.take(f, tokens, &self.search_overlapped)?;
        let fz = self.take(f, tokens, &(self.static_template.start..self.dynamic_template.end))?;
        let fzo = self.take(f, tokens, &(self.static_overlapped.start..self.dynamic_overlapped.end))?;
        Ok([fr, fro, fz, fzo])
    }
}

/// Blender parameters: four fusion attentions (`[scale][direction]`, with
/// direction 0 = static queries, 1 = dynamic queries) and two alignment
/// attentions (`[scale]`).
#[derive(Debug, Clone)]
pub struct Mhb {
    pub fusion: [[CrossAttention; 2]; 2],
    pub align: [CrossAttention; 2],
}

impl Mhb {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Self {
        let ca = |init: &mut Init<'_>, name: &str| {
            CrossAttention::new(init, name, cfg.dim, cfg.heads, cfg.ca_residual, cfg.norm_eps)
        };
        let scale_pair = |init: &mut Init<'_>, tag: &str| {
            if cfg.share_fusion_weights {
                let shared = ca(init, &format!("mhb.fusion.{tag}"));
                [shared.clone(), shared]
            } else {
                [
                    ca(init, &format!("mhb.fusion.{tag}.static")),
                    ca(init, &format!("mhb.fusion.{tag}.dynamic")),
                ]
            }
        };
        let fusion = [scale_pair(init, "initial"), scale_pair(init, "overlapped")];
        let align = [ca(init, "mhb.align.initial"), ca(init, "mhb.align.overlapped")];
        Self { fusion, align }
    }

    /// Cross-fuse static and dynamic templates at both scales and concatenate
    /// each scale's pair along the token axis: `(fZ, fZo)`.
    pub fn template_internal_fusion(
        &self,
        f: &mut Forward<'_>,
        zs: Var,
        zd: Var,
        zso: Var,
        zdo: Var,
    ) -> Result<(Var, Var)> {
        let mut fused = Vec::with_capacity(2);
        for (scale, (s, d)) in [(zs, zd), (zso, zdo)].into_iter().enumerate() {
            let axis = f.g.shape(s).len() - 2;
            if f.g.shape(s) != f.g.shape(d) {
                return Err(CoreError::shape(format!(
                    "static {:?} and dynamic {:?} templates differ in shape",
                    f.g.shape(s),
                    f.g.shape(d)
                )));
            }
            let s2 = self.fusion[scale][0].forward(f, s, d)?;
            let d2 = self.fusion[scale][1].forward(f, d, s)?;
            fused.push(f.g.concat(&[s2, d2], axis)?);
        }
        Ok((fused[0], fused[1]))
    }

    /// Search queries attend to the fused templates of the same scale: `(fR, fRo)`.
    pub fn cross_modal_alignment(
        &self,
        f: &mut Forward<'_>,
        x: Var,
        xo: Var,
        z: Var,
        zo: Var,
    ) -> Result<(Var, Var)> {
        let r = self.align[0].forward(f, x, z)?;
        let ro = self.align[1].forward(f, xo, zo)?;
        Ok((r, ro))
    }

    /// Concatenate `(fR, fRo, fZ, fZo)` into the global sequence.
    pub fn global_integration(f: &mut Forward<'_>, r: Var, ro: Var, z: Var, zo: Var) -> Result<(Var, SegmentMap)> {
        let axis = f.g.shape(r).len() - 2;
        let len = |f: &Forward<'_>, v: Var| f.g.shape(v)[axis];
        let (nz, nzo) = (len(f, z), len(f, zo));
        if nz % 2 != 0 || nzo % 2 != 0 {
            return Err(CoreError::shape("fused template segments must hold two equal halves"));
        }
        let map = SegmentMap::new(len(f, r), len(f, ro), nz / 2, nzo / 2);
        Ok((f.g.concat(&[r, ro, z, zo], axis)?, map))
    }
}

#[cfg(test)]
mod tests {
    use nighttrack_autograd::Tensor;

    use super::*;
    use crate::params::{Mode, ParamStore};

    #[test]
    fn default_segment_lengths() {
        let map = SegmentMap::for_config(&ModelConfig::desk());
        assert_eq!(map.total(), 707);
        assert_eq!(map.search.len(), 256);
        assert_eq!(map.search_overlapped.len(), 225);
        assert_eq!(map.static_template.len() + map.dynamic_template.len(), 128);
        assert_eq!(map.static_overlapped.len() + map.dynamic_overlapped.len(), 98);
    }

    #[test]
    fn single_key_gives_identical_rows() {
        let mut store = ParamStore::new();
        let ca = CrossAttention::new(&mut Init::new(&mut store, 1), "ca", 8, 2, false, 1e-5);
        let mut f = Forward::new(&store, Mode::Eval);
        let q = f.constant(Tensor::from_fn(&[4, 8], |i| (i as f64 * 0.37).sin()));
        let kv = f.constant(Tensor::from_fn(&[1, 8], |i| i as f64 * 0.1));
        let out = ca.forward(&mut f, q, kv).unwrap();
        let d = f.g.data(out);
        for row in d.chunks(8).skip(1) {
            for (a, b) in row.iter().zip(&d[..8]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        let ca = CrossAttention::new(&mut Init::new(&mut store, 1), "ca", 8, 2, true, 1e-5);
        let mut f = Forward::new(&store, Mode::Eval);
        let q = f.constant(Tensor::zeros(&[4, 8]));
        let kv = f.constant(Tensor::zeros(&[3, 6]));
        assert!(ca.forward(&mut f, q, kv).is_err());
    }
}
