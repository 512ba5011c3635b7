//! Adaptive key-token gate: per-head local/global features, a scalar
//! fusion gate, a two-logit Gumbel-Softmax keep map and the attention
//! correction that reweights attended values with it.

use nighttrack_autograd::{Graph, Tensor, Var};

use crate::config::{AktgConfig, CorrectionAxis};
use crate::error::{CoreError, Result};
use crate::nn::Mlp;
use crate::params::{Forward, Init, Mode};

/// Gate parameters for one block, shared by every head of that block.
#[derive(Debug, Clone)]
pub struct Aktg {
    pub local: Mlp,
    pub global: Mlp,
    /// `2·D_h → D_h → 1`, followed by a sigmoid.
    pub gate: Mlp,
    /// `D_h → D_h → 2` keep/drop logits.
    pub map: Mlp,
    pub cfg: AktgConfig,
}

impl Aktg {
    pub fn new(init: &mut Init<'_>, name: &str, head_dim: usize, cfg: AktgConfig) -> Self {
        let d = head_dim;
        Self {
            local: Mlp::new(init, &format!("{name}.local"), d, d, d),
            global: Mlp::new(init, &format!("{name}.global"), d, d, d),
            gate: Mlp::new(init, &format!("{name}.gate"), 2 * d, d, 1),
            map: Mlp::new(init, &format!("{name}.map"), d, d, 2),
            cfg,
        }
    }

    /// Tokenwise local features `[.., N, D_h]` and the token-pooled global
    /// vector `[.., 1, D_h]`.
    pub fn dual_path(&self, f: &mut Forward<'_>, fi: Var) -> Result<(Var, Var)> {
        let local = self.local.forward(f, fi)?;
        let g = self.global.forward(f, fi)?;
        let axis = f.g.shape(g).len() - 2;
        let global = f.g.mean_axis(g, axis)?;
        Ok((local, global))
    }

    /// `α ⊙ local + (1 − α) ⊙ global` with a scalar `α` per token.
    /// Returns `(fused, α)`.
    pub fn gated_fusion(&self, f: &mut Forward<'_>, local: Var, global: Var) -> Result<(Var, Var)> {
        let shape = f.g.shape(local).to_vec();
        let zeros = f.constant(Tensor::zeros(&shape));
        let global_b = f.g.add(zeros, global)?;
        let both = f.g.concat(&[local, global_b], shape.len() - 1)?;
        let logit = self.gate.forward(f, both)?;
        let alpha = f.g.sigmoid(logit);
        let a_local = f.g.mul(alpha, local)?;
        let one_minus = {
            let neg = f.g.neg(alpha);
            f.g.add_scalar(neg, 1.0)
        };
        let a_global = f.g.mul(one_minus, global_b)?;
        Ok((f.g.add(a_local, a_global)?, alpha))
    }

    /// Keep logits `[.., N, 2]` (channel 0 keeps, channel 1 drops).
    pub fn map_logits(&self, f: &mut Forward<'_>, fused: Var) -> Result<Var> {
        self.map.forward(f, fused)
    }

    /// Keep values `[.., N, 1]` for one head. `stream` selects the noise stream.
    pub fn activation_map(&self, f: &mut Forward<'_>, fused: Var, stream: u64) -> Result<Var> {
        let logits = self.map_logits(f, fused)?;
        activation_from_logits(f, logits, self.cfg.tau, self.cfg.hard, stream)
    }

    /// Full gate for one head's input slice `[.., N, D_h]`.
    pub fn head_map(&self, f: &mut Forward<'_>, fi: Var, stream: u64) -> Result<Var> {
        let (local, global) = self.dual_path(f, fi)?;
        let (fused, _) = self.gated_fusion(f, local, global)?;
        self.activation_map(f, fused, stream)
    }
}

/// Eval mode: hard argmax of the logits with no noise (keep wins only when
/// strictly larger). Train mode: keep channel of
/// `softmax((logits + G) / τ)`, optionally made hard by straight-through.
pub fn activation_from_logits(f: &mut Forward<'_>, logits: Var, tau: f64, hard: bool, stream: u64) -> Result<Var> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(CoreError::config(format!("temperature must be positive, got {tau}")));
    }
    let shape = f.g.shape(logits).to_vec();
    let last = shape.len() - 1;
    if shape[last] != 2 {
        return Err(CoreError::shape(format!("activation logits need 2 channels, got {shape:?}")));
    }
    if f.mode == Mode::Eval {
        let keep: Vec<f64> = f
            .g
            .data(logits)
            .chunks_exact(2)
            .map(|c| if c[0] > c[1] { 1.0 } else { 0.0 })
            .collect();
        let mut out_shape = shape;
        out_shape[last] = 1;
        return Ok(f.constant(Tensor::new(out_shape, keep)?));
    }
    let noise = f.gumbel(&shape, stream);
    let noise = f.constant(noise);
    let perturbed = f.g.add(logits, noise)?;
    let scaled = f.g.scale(perturbed, 1.0 / tau);
    let probs = f.g.softmax(scaled, last)?;
    let keep = f.g.slice(probs, last, 0, 1)?;
    if !hard {
        return Ok(keep);
    }
    let values = f.g.value(keep).clone();
    let shift = values.map(|p| if p > 0.5 { 1.0 - p } else { -p });
    let shift = f.constant(shift);
    Ok(f.g.add(keep, shift)?)
}

/// Attention correction for one head: `(A·diag(M) + A)·V` for column
/// scaling, `(diag(M)·A + A)·V` for row scaling. `a: [.., N, N]`,
/// `m: [.., N, 1]`, `v: [.., N, D_h]`.
pub fn attention_correction(g: &mut Graph, a: Var, m: Var, v: Var, axis: CorrectionAxis) -> Result<Var> {
    let one_plus = g.add_scalar(m, 1.0);
    match axis {
        // A·diag(1+M)·V: scaling key column j equals scaling value row j
        CorrectionAxis::Column => {
            let scaled = g.mul(v, one_plus)?;
            Ok(g.matmul(a, scaled)?)
        }
        CorrectionAxis::Row => {
            let av = g.matmul(a, v)?;
            Ok(g.mul(av, one_plus)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn gate() -> (ParamStore, Aktg) {
        let mut store = ParamStore::new();
        let a = Aktg::new(&mut Init::new(&mut store, 9), "aktg", 4, AktgConfig::default());
        (store, a)
    }

    fn input(f: &mut Forward<'_>, n: usize) -> Var {
        f.constant(Tensor::from_fn(&[n, 4], |i| ((i * 7 % 11) as f64 - 5.0) * 0.2))
    }

    #[test]
    fn single_token_global_equals_pooled_mlp() {
        let (store, a) = gate();
        let mut f = Forward::new(&store, Mode::Eval);
        let x = input(&mut f, 1);
        let (_, global) = a.dual_path(&mut f, x).unwrap();
        let direct = a.global.forward(&mut f, x).unwrap();
        assert_eq!(f.g.data(global), f.g.data(direct));
    }

    #[test]
    fn constant_tokens_make_local_rows_equal() {
        let (store, a) = gate();
        let mut f = Forward::new(&store, Mode::Eval);
        let x = f.constant(Tensor::full(&[5, 4], 0.3));
        let (local, _) = a.dual_path(&mut f, x).unwrap();
        let d = f.g.data(local);
        assert!(d.chunks(4).all(|r| r == &d[..4]));
    }

    #[test]
    fn gate_endpoints_are_exact() {
        let (mut store, a) = gate();
        let bias = a.gate.fc2.bias.unwrap();
        for (b, want_local) in [(1e3, true), (-1e3, false)] {
            store.set(bias, Tensor::full(&[1], b)).unwrap();
            let mut f = Forward::new(&store, Mode::Eval);
            let x = input(&mut f, 6);
            let (local, global) = a.dual_path(&mut f, x).unwrap();
            let (fused, _) = a.gated_fusion(&mut f, local, global).unwrap();
            let fused = f.g.data(fused).to_vec();
            if want_local {
                assert_eq!(fused, f.g.data(local));
            } else {
                let gv = f.g.data(global);
                assert!(fused.chunks(4).all(|r| r == gv));
            }
        }
    }

    #[test]
    fn fused_lies_between_paths() {
        let (store, a) = gate();
        let mut f = Forward::new(&store, Mode::Eval);
        let x = input(&mut f, 7);
        let (local, global) = a.dual_path(&mut f, x).unwrap();
        let (fused, _) = a.gated_fusion(&mut f, local, global).unwrap();
        let (l, gl, fu) = (f.g.data(local), f.g.data(global), f.g.data(fused));
        for (i, v) in fu.iter().enumerate() {
            let (x, y) = (l[i], gl[i % 4]);
            assert!(*v >= x.min(y) - 1e-15 && *v <= x.max(y) + 1e-15);
        }
    }

    #[test]
    fn eval_map_is_argmax() {
        let store = ParamStore::new();
        let mut f = Forward::new(&store, Mode::Eval);
        let logits = f.constant(Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap());
        let m = activation_from_logits(&mut f, logits, 1.0, false, 0).unwrap();
        assert_eq!(f.g.data(m), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn large_temperature_flattens_soft_map() {
        let store = ParamStore::new();
        let mut f = Forward::new(&store, Mode::Train).with_noise_seed(Some(4));
        let logits = f.constant(Tensor::from_fn(&[10, 2], |i| i as f64 - 4.0));
        let m = activation_from_logits(&mut f, logits, 1e6, false, 0).unwrap();
        assert!(f.g.data(m).iter().all(|v| (v - 0.5).abs() < 1e-3));
    }

    #[test]
    fn soft_map_varies_with_seed() {
        let store = ParamStore::new();
        let draw = |seed| {
            let mut f = Forward::new(&store, Mode::Train).with_noise_seed(Some(seed));
            let logits = f.constant(Tensor::zeros(&[4, 2]));
            let m = activation_from_logits(&mut f, logits, 1.0, false, 0).unwrap();
            f.g.data(m).to_vec()
        };
        let (a, b) = (draw(1), draw(2));
        assert_ne!(a, b);
        assert!(a.iter().chain(&b).all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn straight_through_values_are_binary() {
        let store = ParamStore::new();
        let mut f = Forward::new(&store, Mode::Train).with_noise_seed(Some(8));
        let logits = f.constant(Tensor::from_fn(&[16, 2], |i| (i as f64).sin()));
        let m = activation_from_logits(&mut f, logits, 1.0, true, 3).unwrap();
        assert!(f.g.data(m).iter().all(|v| *v == 0.0 || *v == 1.0));
    }
}
