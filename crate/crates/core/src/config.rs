//! Model configuration and the plain-text `key = value` format used by
//! config files and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{CoreError, Result};

/// How the activation map reweights a head's attention map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionAxis {
    /// Scale key columns: `A·diag(M) + A`.
    Column,
    /// Scale query rows: `diag(M)·A + A`.
    Row,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AktgConfig {
    /// Blocks that apply the gate; `None` means every block.
    pub blocks: Option<Vec<usize>>,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    /// Straight-through hard maps in train mode.
    pub hard: bool,
    pub correction: CorrectionAxis,
}

impl Default for AktgConfig {
    fn default() -> Self {
        Self {
            blocks: None,
            tau: 1.0,
            hard: false,
            correction: CorrectionAxis::Column,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub search_size: usize,
    pub template_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub aktg: AktgConfig,
    /// Pre-norm + residual form of every cross-attention in the blender.
    pub ca_residual: bool,
    /// Static→dynamic and dynamic→static fusion share one parameter set per scale.
    pub share_fusion_weights: bool,
    pub head_channels: usize,
    pub ntc_dim: usize,
    pub theta_low: f64,
    pub theta_high: f64,
    pub template_context: f64,
    pub search_context: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Default desk-scale model: 256² search, 128² templates, patch 16.
    pub fn desk() -> Self {
        Self {
            search_size: 256,
            template_size: 128,
            patch: 16,
            dim: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 4,
            aktg: AktgConfig::default(),
            ca_residual: true,
            share_fusion_weights: false,
            head_channels: 64,
            ntc_dim: 64,
            theta_low: 0.3,
            theta_high: 0.8,
            template_context: 2.0,
            search_context: 4.0,
            norm_eps: 1e-5,
        }
    }

    /// Gradient-check scale: 64² search, 32² templates, patch 8, D 32, h 2, depth 2.
    pub fn tiny() -> Self {
        Self {
            search_size: 64,
            template_size: 32,
            patch: 8,
            dim: 32,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
            head_channels: 16,
            ntc_dim: 16,
            ..Self::desk()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch
    }

    pub fn template_grid(&self) -> usize {
        self.template_size / self.patch
    }

    /// Token count of the global sequence: search + overlapped search +
    /// both templates at both scales.
    pub fn total_tokens(&self) -> usize {
        let s = self.search_grid();
        let t = self.template_grid();
        s * s + (s - 1) * (s - 1) + 2 * (t * t) + 2 * (t - 1) * (t - 1)
    }

    pub fn aktg_in_block(&self, block: usize) -> bool {
        match &self.aktg.blocks {
            None => true,
            Some(list) => list.contains(&block),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.patch == 0 || !self.patch.is_multiple_of(2) {
            errs.push(format!("patch {} must be a positive even number", self.patch));
        } else {
            for (name, size) in [("search_size", self.search_size), ("template_size", self.template_size)] {
                if size % self.patch != 0 || size / self.patch < 2 {
                    errs.push(format!(
                        "{name} {size} must be a multiple of patch {} spanning at least 2 patches",
                        self.patch
                    ));
                }
            }
        }
        if self.depth == 0 {
            errs.push("depth must be >= 1".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            errs.push(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if self.mlp_ratio == 0 || self.head_channels == 0 || self.ntc_dim == 0 {
            errs.push("mlp_ratio, head_channels and ntc_dim must be positive".into());
        }
        if !(self.aktg.tau > 0.0) {
            errs.push(format!("aktg tau {} must be positive", self.aktg.tau));
        }
        if let Some(blocks) = &self.aktg.blocks {
            if let Some(b) = blocks.iter().find(|&&b| b >= self.depth) {
                errs.push(format!("aktg block {b} out of range for depth {}", self.depth));
            }
        }
        if !(0.0 < self.theta_low && self.theta_low < self.theta_high && self.theta_high < 1.0) {
            errs.push(format!(
                "thresholds must satisfy 0 < theta_low < theta_high < 1, got ({}, {})",
                self.theta_low, self.theta_high
            ));
        }
        if !(self.template_context > 0.0 && self.search_context > 0.0) {
            errs.push("context factors must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            errs.push("norm_eps must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(errs.join("; ")))
        }
    }

    /// Apply one `key = value` pair. Returns `Ok(false)` for unknown keys so
    /// callers can route them to other config sections.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "preset" => {
                *self = match value {
                    "tiny" => Self::tiny(),
                    "desk" | "default" => Self::desk(),
                    other => return Err(CoreError::config(format!("unknown preset {other:?}"))),
                }
            }
            "search_size" => self.search_size = parse(key, value)?,
            "template_size" => self.template_size = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "aktg_blocks" => {
                self.aktg.blocks = match value.trim() {
                    "all" => None,
                    "none" | "" => Some(Vec::new()),
                    list => Some(
                        list.split(',')
                            .map(|s| parse::<usize>(key, s.trim()))
                            .collect::<Result<_>>()?,
                    ),
                }
            }
            "aktg_tau" => self.aktg.tau = parse(key, value)?,
            "aktg_hard" => self.aktg.hard = parse(key, value)?,
            "aktg_correction" => {
                self.aktg.correction = match value {
                    "column" => CorrectionAxis::Column,
                    "row" => CorrectionAxis::Row,
                    other => return Err(CoreError::config(format!("unknown correction axis {other:?}"))),
                }
            }
            "ca_residual" => self.ca_residual = parse(key, value)?,
            "share_fusion_weights" => self.share_fusion_weights = parse(key, value)?,
            "head_channels" => self.head_channels = parse(key, value)?,
            "ntc_dim" => self.ntc_dim = parse(key, value)?,
            "theta_low" => self.theta_low = parse(key, value)?,
            "theta_high" => self.theta_high = parse(key, value)?,
            "template_context" => self.template_context = parse(key, value)?,
            "search_context" => self.search_context = parse(key, value)?,
            "norm_eps" => self.norm_eps = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let blocks = match &self.aktg.blocks {
            None => "all".to_string(),
            Some(b) if b.is_empty() => "none".to_string(),
            Some(b) => b.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        };
        let correction = match self.aktg.correction {
            CorrectionAxis::Column => "column",
            CorrectionAxis::Row => "row",
        };
        let pairs: [(&str, String); 21] = [
            ("search_size", self.search_size.to_string()),
            ("template_size", self.template_size.to_string()),
            ("patch", self.patch.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("depth", self.depth.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("aktg_blocks", blocks),
            ("aktg_tau", self.aktg.tau.to_string()),
            ("aktg_hard", self.aktg.hard.to_string()),
            ("aktg_correction", correction.to_string()),
            ("ca_residual", self.ca_residual.to_string()),
            ("share_fusion_weights", self.share_fusion_weights.to_string()),
            ("head_channels", self.head_channels.to_string()),
            ("ntc_dim", self.ntc_dim.to_string()),
            ("theta_low", self.theta_low.to_string()),
            ("theta_high", self.theta_high.to_string()),
            ("template_context", self.template_context.to_string()),
            ("search_context", self.search_context.to_string()),
            ("norm_eps", self.norm_eps.to_string()),
            ("version", "1".to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parse a full `key = value` document; unknown keys are an error.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (k, v) in parse_kv(text)? {
            if k == "version" {
                continue;
            }
            if !cfg.apply(&k, &v)? {
                return Err(CoreError::config(format!("unknown model key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Split a `key = value` document into ordered pairs. `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CoreError::config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim().to_string();
        if seen.insert(k.clone(), n + 1).is_some() {
            return Err(CoreError::config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CoreError::config(format!("invalid value {value:?} for {key}")))
}
