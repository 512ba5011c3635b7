//! Prediction head on the search tokens and box decoding.
//!
//! Channel layout of the raw head output (last axis, 5 values per cell):
//! classification logit, x/y offset within the cell, normalised width/height.

use nighttrack_autograd::{Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::geometry::{BoundingBox, CropGeometry};
use crate::nn::Linear;
use crate::params::{BatchStats, Forward, Init, Mode, ParamId};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// 3×3 same-padding convolution without bias, batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    /// `[9·C_in, C_out]`, rows ordered (ky, kx, c_in).
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl ConvBnRelu {
    pub fn new(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize, eps: f64) -> Self {
        Self {
            weight: init.glorot(&format!("{name}.weight"), 9 * c_in, c_out),
            gamma: init.constant(&format!("{name}.bn.gamma"), &[c_out], 1.0, true),
            beta: init.constant(&format!("{name}.bn.beta"), &[c_out], 0.0, true),
            running_mean: init.constant(&format!("{name}.bn.running_mean"), &[c_out], 0.0, false),
            running_var: init.constant(&format!("{name}.bn.running_var"), &[c_out], 1.0, false),
            eps,
        }
    }

    /// `x: [B, H, W, C_in]` → `[B, H, W, C_out]`.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let s = f.g.shape(x).to_vec();
        let cols = f.g.im2col(x, 3, 1)?;
        let w = f.p(self.weight);
        let y = f.g.matmul(cols, w)?;
        let c = f.g.shape(y)[1];
        let normed = match f.mode {
            Mode::Train => {
                let (mean, var) = column_moments(f.g.data(y), c);
                f.batch_stats.push(BatchStats {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    mean,
                    var,
                });
                f.g.instance_norm(y, self.eps)?
            }
            Mode::Eval => {
                let rm = f.store().get(self.running_mean).clone();
                let inv = f.store().get(self.running_var).map(|v| 1.0 / (v + self.eps).sqrt());
                let rm = f.constant(rm);
                let inv = f.constant(inv);
                let centred = f.g.sub(y, rm)?;
                f.g.mul(centred, inv)?
            }
        };
        let gamma = f.p(self.gamma);
        let beta = f.p(self.beta);
        let scaled = f.g.mul(normed, gamma)?;
        let shifted = f.g.add(scaled, beta)?;
        let out = f.g.relu(shifted);
        Ok(f.g.reshape(out, &[s[0], s[1], s[2], c])?)
    }
}

fn column_moments(data: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = (data.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in data.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; c];
    for row in data.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= rows);
    (mean, var)
}

/// Head outputs as graph nodes: `cls: [B, G²]` logits and
/// `reg: [B, G², 4]` sigmoid-squashed offset and size.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub cls: Var,
    pub reg: Var,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub layers: Vec<ConvBnRelu>,
    pub out: Linear,
    pub grid: usize,
}

impl Head {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Self {
        let hc = cfg.head_channels;
        let layers = (0..4)
            .map(|i| {
                let c_in = if i == 0 { cfg.dim } else { hc };
                ConvBnRelu::new(init, &format!("head.conv{i}"), c_in, hc, cfg.norm_eps)
            })
            .collect();
        Self {
            layers,
            out: Linear::new(init, "head.out", hc, 5, true),
            grid: cfg.search_grid(),
        }
    }

    /// `search: [B, G², D]` tokens of the initial-scale search segment.
    pub fn forward(&self, f: &mut Forward<'_>, search: Var) -> Result<HeadVars> {
        let s = f.g.shape(search).to_vec();
        let (b, n, d) = match s.as_slice() {
            [n, d] => (1, *n, *d),
            [b, n, d] => (*b, *n, *d),
            _ => return Err(CoreError::shape(format!("head expects [B, N, D] tokens, got {s:?}"))),
        };
        let g = (n as f64).sqrt().round() as usize;
        if g * g != n {
            return Err(CoreError::shape(format!("{n} search tokens do not form a square grid")));
        }
        let mut x = f.g.reshape(search, &[b, g, g, d])?;
        for layer in &self.layers {
            x = layer.forward(f, x)?;
        }
        let c = f.g.shape(x)[3];
        let rows = f.g.reshape(x, &[b, n, c])?;
        let raw = self.out.forward(f, rows)?;
        let cls = f.g.slice(raw, 2, 0, 1)?;
        let cls = f.g.reshape(cls, &[b, n])?;
        let reg = f.g.slice(raw, 2, 1, 4)?;
        let reg = f.g.sigmoid(reg);
        Ok(HeadVars { cls, reg })
    }
}

/// Plain head output for one sample on a `G×G` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `[G, G]` classification scores.
    pub cls: Tensor,
    /// `[2, G, G]` sub-cell x/y offsets in `[0, 1)`.
    pub offset: Tensor,
    /// `[2, G, G]` width/height as a fraction of the search side.
    pub size: Tensor,
}

impl HeadOutput {
    /// Extract sample `index` from graph outputs.
    pub fn from_vars(f: &Forward<'_>, vars: &HeadVars, index: usize) -> Result<Self> {
        let n = f.g.shape(vars.cls)[1];
        let g = (n as f64).sqrt().round() as usize;
        let cls = f.g.data(vars.cls)[index * n..(index + 1) * n].to_vec();
        let reg = &f.g.data(vars.reg)[index * n * 4..(index + 1) * n * 4];
        let mut offset = vec![0.0; 2 * n];
        let mut size = vec![0.0; 2 * n];
        for (cell, r) in reg.chunks_exact(4).enumerate() {
            offset[cell] = r[0];
            offset[n + cell] = r[1];
            size[cell] = r[2];
            size[n + cell] = r[3];
        }
        Ok(Self {
            cls: Tensor::new(vec![g, g], cls)?,
            offset: Tensor::new(vec![2, g, g], offset)?,
            size: Tensor::new(vec![2, g, g], size)?,
        })
    }

    pub fn grid(&self) -> usize {
        self.cls.shape()[0]
    }

    /// Flat index of the highest score; ties go to the smallest index.
    pub fn peak(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.cls.data().iter().enumerate() {
            if v > self.cls.data()[best] {
                best = i;
            }
        }
        best
    }
}

/// Decode the peak cell into a frame-space box. `geom` maps search-crop
/// pixels to frame pixels; its `size` is the search side in crop pixels.
pub fn decode_box(out: &HeadOutput, geom: &CropGeometry) -> BoundingBox {
    let g = out.grid();
    let n = g * g;
    let side = geom.size as f64;
    let cell = side / g as f64;
    let idx = out.peak();
    let (row, col) = (idx / g, idx % g);
    let (ox, oy) = (out.offset.data()[idx], out.offset.data()[n + idx]);
    let (sw, sh) = (out.size.data()[idx], out.size.data()[n + idx]);
    let cx = (col as f64 + ox) * cell;
    let cy = (row as f64 + oy) * cell;
    geom.to_frame(&BoundingBox::from_center(cx, cy, sw * side, sh * side))
}

/// Regression target for a box given in search-crop pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub row: usize,
    pub col: usize,
    /// Box centre and size normalised by the search side.
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Target {
    pub fn cell(&self, grid: usize) -> usize {
        self.row * grid + self.col
    }

    pub fn offset(&self, grid: usize) -> (f64, f64) {
        let g = grid as f64;
        (self.cx * g - self.col as f64, self.cy * g - self.row as f64)
    }
}

/// Encode a crop-space box: the cell containing its centre (clamped to the
/// grid) plus normalised centre and size.
pub fn encode_target(b: &BoundingBox, side: usize, grid: usize) -> Result<Target> {
    b.validate()?;
    let s = side as f64;
    let (cx, cy) = b.center();
    let cell = s / grid as f64;
    let idx = |v: f64| ((v / cell).floor().max(0.0) as usize).min(grid - 1);
    Ok(Target {
        row: idx(cy),
        col: idx(cx),
        cx: cx / s,
        cy: cy / s,
        w: b.w / s,
        h: b.h / s,
    })
}
