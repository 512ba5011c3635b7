//! Template calibrator: offset attention between dynamic-template and
//! search tokens, and the confidence score gating template updates.

use nighttrack_autograd::Var;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::mhb::SegmentMap;
use crate::nn::{attention_weights, Linear};
use crate::params::{Forward, Init};

#[derive(Debug, Clone)]
pub struct Ntc {
    /// Shared projection applied to both template and search tokens.
    pub proj: Linear,
    /// Bias-free: instance norm would cancel a bias anyway.
    pub offset: Linear,
    pub score_hidden: Linear,
    pub score_out: Linear,
    pub eps: f64,
}

/// Final-stage search, static and dynamic template tokens.
#[derive(Debug, Clone, Copy)]
pub struct FinalSegments {
    pub search: Var,
    pub static_template: Var,
    pub dynamic_template: Var,
}

/// Select the initial-scale search and template segments of `f_f`; the
/// overlapped segments do not take part in calibration.
pub fn partition_final(f: &mut Forward<'_>, tokens: Var, map: &SegmentMap) -> Result<FinalSegments> {
    Ok(FinalSegments {
        search: map.take(f, tokens, &map.search)?,
        static_template: map.take(f, tokens, &map.static_template)?,
        dynamic_template: map.take(f, tokens, &map.dynamic_template)?,
    })
}

impl Ntc {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Self {
        let k = cfg.ntc_dim;
        Self {
            proj: Linear::new(init, "ntc.proj", cfg.dim, k, true),
            offset: Linear::new(init, "ntc.offset", k, k, false),
            score_hidden: Linear::new(init, "ntc.score.fc1", k, k, true),
            score_out: Linear::new(init, "ntc.score.fc2", k, 1, true),
            eps: cfg.norm_eps,
        }
    }

    /// `f_O = ReLU(InsNorm(Φ_l(Φ_p(Z) − softmax(Φ_p(Z)·Φ_p(X)ᵀ/√d)·Φ_p(X))))`,
    /// i.e. the offset is taken in query space. `zd: [.., Nz, D]`,
    /// `x: [.., Nx, D]` → `[.., Nz, d_k]`.
    pub fn offset_attention(&self, f: &mut Forward<'_>, zd: Var, x: Var) -> Result<Var> {
        let q = self.proj.forward(f, zd)?;
        let kv = self.proj.forward(f, x)?;
        let a = attention_weights(&mut f.g, q, kv)?;
        let attn = f.g.matmul(a, kv)?;
        let off = f.g.sub(q, attn)?;
        let off = self.offset.forward(f, off)?;
        let off = f.g.instance_norm(off, self.eps)?;
        Ok(f.g.relu(off))
    }

    /// Confidence `[.., 1, 1]`: sigmoid of an MLP whose hidden layer is
    /// mean-pooled over tokens before the output layer.
    pub fn score(&self, f: &mut Forward<'_>, fo: Var) -> Result<Var> {
        let h = self.score_hidden.forward(f, fo)?;
        let h = f.g.relu(h);
        let axis = f.g.shape(h).len() - 2;
        let pooled = f.g.mean_axis(h, axis)?;
        let logit = self.score_out.forward(f, pooled)?;
        Ok(f.g.sigmoid(logit))
    }
}

/// Summary of the offset feature, kept for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetStats {
    pub mean: f64,
    pub max: f64,
    pub active_fraction: f64,
}

impl OffsetStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        Self {
            mean: values.iter().sum::<f64>() / n,
            max: values.iter().copied().fold(0.0, f64::max),
            active_fraction: values.iter().filter(|v| **v > 0.0).count() as f64 / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationDecision {
    pub s_c: f64,
    /// `theta_low < s_c < theta_high`.
    pub update: bool,
    /// Whether the tracker actually replaced its dynamic template (false when
    /// calibration is disabled).
    pub applied: bool,
    pub offset: OffsetStats,
}

/// Keep a sigmoid output strictly inside `(0, 1)`; saturation in f64 can
/// otherwise round to an endpoint.
pub fn open_unit(s: f64) -> f64 {
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

/// Band test with strict inequalities at both ends.
pub fn in_band(s_c: f64, theta_low: f64, theta_high: f64) -> bool {
    theta_low < s_c && s_c < theta_high
}

pub fn calibrate(s_c: f64, offset: OffsetStats, theta_low: f64, theta_high: f64) -> Result<CalibrationDecision> {
    if !s_c.is_finite() {
        return Err(CoreError::Numerical(format!("confidence score is {s_c}")));
    }
    let s_c = open_unit(s_c);
    Ok(CalibrationDecision {
        s_c,
        update: in_band(s_c, theta_low, theta_high),
        applied: false,
        offset,
    })
}

#[cfg(test)]
mod tests {
    use nighttrack_autograd::Tensor;

    use super::*;
    use crate::params::{Mode, ParamStore};

    fn stats() -> OffsetStats {
        OffsetStats::of(&[0.0])
    }

    #[test]
    fn band_examples() {
        assert!(calibrate(0.5, stats(), 0.3, 0.8).unwrap().update);
        assert!(!calibrate(0.9, stats(), 0.3, 0.8).unwrap().update);
        assert!(!calibrate(0.2, stats(), 0.3, 0.8).unwrap().update);
        assert!(!calibrate(0.3, stats(), 0.3, 0.8).unwrap().update);
        assert!(!calibrate(0.8, stats(), 0.3, 0.8).unwrap().update);
    }

    #[test]
    fn saturated_scores_stay_open() {
        let hi = calibrate(1.0, stats(), 0.3, 0.8).unwrap().s_c;
        let lo = calibrate(0.0, stats(), 0.3, 0.8).unwrap().s_c;
        assert!(hi < 1.0 && lo > 0.0);
        assert!(calibrate(f64::NAN, stats(), 0.3, 0.8).is_err());
    }

    #[test]
    fn matching_search_token_gives_zero_offset() {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let ntc = Ntc::new(&mut Init::new(&mut store, 5), &cfg);
        let mut f = Forward::new(&store, Mode::Eval);
        let token = Tensor::from_fn(&[1, cfg.dim], |i| (i as f64 * 0.3).cos());
        let mut tpl = Vec::new();
        for _ in 0..4 {
            tpl.extend_from_slice(token.data());
        }
        let zd = f.constant(Tensor::new(vec![4, cfg.dim], tpl).unwrap());
        let x = f.constant(token);
        let fo = ntc.offset_attention(&mut f, zd, x).unwrap();
        assert!(f.g.data(fo).iter().all(|v| *v == 0.0));
        let s = ntc.score(&mut f, fo).unwrap();
        let s = f.g.data(s)[0];
        assert!(s > 0.0 && s < 1.0);
    }
}
