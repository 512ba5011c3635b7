//! Classification and SIoU box losses.

use nighttrack_autograd::{Graph, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::geometry::BoundingBox;
use crate::head::{HeadVars, Target};

/// Guards the angle term when both centres coincide.
const ANGLE_EPS: f64 = 1e-12;
/// Shape-cost exponent.
const SHAPE_THETA: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub siou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 2.0, siou: 2.0 }
    }
}

/// Softmax cross-entropy over all cells, averaged over the batch.
/// `cls: [B, G²]`.
pub fn ce_loss(g: &mut Graph, cls: Var, cells: &[usize]) -> Result<Var> {
    let s = g.shape(cls).to_vec();
    if s.len() != 2 || s[0] != cells.len() {
        return Err(CoreError::shape(format!(
            "classification map {s:?} does not match {} targets",
            cells.len()
        )));
    }
    let n = s[1];
    if let Some(c) = cells.iter().find(|&&c| c >= n) {
        return Err(CoreError::shape(format!("target cell {c} outside {n} cells")));
    }
    let logp = g.log_softmax(cls, 1)?;
    let mask = Tensor::from_fn(&s, |i| if cells[i / n] == i % n { 1.0 } else { 0.0 });
    let mask = g.constant(mask);
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, -1.0 / cells.len() as f64))
}

/// Boxes as centre/size columns, each `[B, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct BoxVars {
    pub cx: Var,
    pub cy: Var,
    pub w: Var,
    pub h: Var,
}

impl BoxVars {
    pub fn constant(g: &mut Graph, boxes: &[BoundingBox]) -> Result<Self> {
        let col = |g: &mut Graph, f: &dyn Fn(&BoundingBox) -> f64| -> Result<Var> {
            let data = boxes.iter().map(f).collect();
            Ok(g.constant(Tensor::new(vec![boxes.len(), 1], data)?))
        };
        Ok(Self {
            cx: col(g, &|b| b.center().0)?,
            cy: col(g, &|b| b.center().1)?,
            w: col(g, &|b| b.w)?,
            h: col(g, &|b| b.h)?,
        })
    }
}

/// Per-sample SIoU `[B, 1]`: `1 − IoU + (Δ + Ω)/2` with the angle cost
/// `Λ = sin 2α = 2|dx||dy| / (dx² + dy²)`, distance cost
/// `Δ = Σ (1 − exp(−(2−Λ)ρ))` over `ρ = (d/c)²` against the enclosing box,
/// and shape cost `Ω = Σ (1 − exp(−|Δs|/max s))⁴`.
pub fn siou_vars(g: &mut Graph, p: &BoxVars, t: &BoxVars) -> Result<Var> {
    let half = |g: &mut Graph, v: Var| g.scale(v, 0.5);
    let (pw2, ph2, tw2, th2) = (half(g, p.w), half(g, p.h), half(g, t.w), half(g, t.h));
    let px1 = g.sub(p.cx, pw2)?;
    let px2 = g.add(p.cx, pw2)?;
    let py1 = g.sub(p.cy, ph2)?;
    let py2 = g.add(p.cy, ph2)?;
    let tx1 = g.sub(t.cx, tw2)?;
    let tx2 = g.add(t.cx, tw2)?;
    let ty1 = g.sub(t.cy, th2)?;
    let ty2 = g.add(t.cy, th2)?;

    let overlap = |g: &mut Graph, a1: Var, a2: Var, b1: Var, b2: Var| -> Result<Var> {
        let hi = g.minimum(a2, b2)?;
        let lo = g.maximum(a1, b1)?;
        let d = g.sub(hi, lo)?;
        Ok(g.relu(d))
    };
    let iw = overlap(g, px1, px2, tx1, tx2)?;
    let ih = overlap(g, py1, py2, ty1, ty2)?;
    let inter = g.mul(iw, ih)?;
    let pa = g.mul(p.w, p.h)?;
    let ta = g.mul(t.w, t.h)?;
    let union = g.add(pa, ta)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;

    let extent = |g: &mut Graph, a1: Var, a2: Var, b1: Var, b2: Var| -> Result<Var> {
        let hi = g.maximum(a2, b2)?;
        let lo = g.minimum(a1, b1)?;
        Ok(g.sub(hi, lo)?)
    };
    let cw = extent(g, px1, px2, tx1, tx2)?;
    let ch = extent(g, py1, py2, ty1, ty2)?;

    let dx = g.sub(t.cx, p.cx)?;
    let dy = g.sub(t.cy, p.cy)?;
    let adx = g.abs(dx);
    let ady = g.abs(dy);
    let num = g.mul(adx, ady)?;
    let num = g.scale(num, 2.0);
    let dx2 = g.powi(dx, 2);
    let dy2 = g.powi(dy, 2);
    let den = g.add(dx2, dy2)?;
    let den = g.add_scalar(den, ANGLE_EPS);
    let lambda = g.div(num, den)?;
    let neg_gamma = g.add_scalar(lambda, -2.0);

    let dist_term = |g: &mut Graph, d2: Var, c: Var| -> Result<Var> {
        let c2 = g.powi(c, 2);
        let rho = g.div(d2, c2)?;
        let e = g.mul(neg_gamma, rho)?;
        let e = g.exp(e);
        let e = g.neg(e);
        Ok(g.add_scalar(e, 1.0))
    };
    let delta_x = dist_term(g, dx2, cw)?;
    let delta_y = dist_term(g, dy2, ch)?;
    let delta = g.add(delta_x, delta_y)?;

    let shape_term = |g: &mut Graph, a: Var, b: Var| -> Result<Var> {
        let d = g.sub(a, b)?;
        let d = g.abs(d);
        let m = g.maximum(a, b)?;
        let omega = g.div(d, m)?;
        let e = g.neg(omega);
        let e = g.exp(e);
        let e = g.neg(e);
        let e = g.add_scalar(e, 1.0);
        Ok(g.powi(e, SHAPE_THETA))
    };
    let omega_w = shape_term(g, p.w, t.w)?;
    let omega_h = shape_term(g, p.h, t.h)?;
    let omega = g.add(omega_w, omega_h)?;

    let penalty = g.add(delta, omega)?;
    let penalty = g.scale(penalty, 0.5);
    let one_minus_iou = {
        let n = g.neg(iou);
        g.add_scalar(n, 1.0)
    };
    Ok(g.add(one_minus_iou, penalty)?)
}

/// SIoU of two pixel boxes.
pub fn siou_loss(pred: &BoundingBox, gt: &BoundingBox) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    let mut g = Graph::new();
    let p = BoxVars::constant(&mut g, std::slice::from_ref(pred))?;
    let t = BoxVars::constant(&mut g, std::slice::from_ref(gt))?;
    let l = siou_vars(&mut g, &p, &t)?;
    Ok(g.data(l)[0])
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub siou: Var,
}

/// `λ_ce · CE + λ_siou · SIoU`, regressing the box read at each sample's
/// target cell. Boxes are compared in search-normalised coordinates.
pub fn total_loss(g: &mut Graph, head: &HeadVars, targets: &[Target], weights: LossWeights) -> Result<LossParts> {
    let s = g.shape(head.reg).to_vec();
    let (b, n) = (s[0], s[1]);
    let grid = (n as f64).sqrt().round() as usize;
    let cells: Vec<usize> = targets.iter().map(|t| t.cell(grid)).collect();
    let ce = ce_loss(g, head.cls, &cells)?;

    let mask = Tensor::from_fn(&[b, n, 1], |i| if cells[i / n] == i % n { 1.0 } else { 0.0 });
    let mask = g.constant(mask);
    let picked = g.mul(head.reg, mask)?;
    let picked = g.sum_axis(picked, 1)?;
    let picked = g.reshape(picked, &[b, 4])?;
    let parts = g.split(picked, 1, &[1, 1, 1, 1])?;
    let inv_g = 1.0 / grid as f64;
    let cell_x = Tensor::from_fn(&[b, 1], |i| targets[i].col as f64 * inv_g);
    let cell_y = Tensor::from_fn(&[b, 1], |i| targets[i].row as f64 * inv_g);
    let cell_x = g.constant(cell_x);
    let cell_y = g.constant(cell_y);
    let ox = g.scale(parts[0], inv_g);
    let oy = g.scale(parts[1], inv_g);
    let pred = BoxVars {
        cx: g.add(cell_x, ox)?,
        cy: g.add(cell_y, oy)?,
        w: parts[2],
        h: parts[3],
    };
    let col = |g: &mut Graph, f: &dyn Fn(&Target) -> f64| -> Result<Var> {
        Ok(g.constant(Tensor::new(vec![b, 1], targets.iter().map(f).collect())?))
    };
    let gt = BoxVars {
        cx: col(g, &|t| t.cx)?,
        cy: col(g, &|t| t.cy)?,
        w: col(g, &|t| t.w)?,
        h: col(g, &|t| t.h)?,
    };
    let siou = siou_vars(g, &pred, &gt)?;
    let siou = g.mean(siou)?;
    let a = g.scale(ce, weights.ce);
    let c = g.scale(siou, weights.siou);
    let total = g.add(a, c)?;
    Ok(LossParts { total, ce, siou })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_cells() {
        let mut g = Graph::new();
        let cls = g.constant(Tensor::zeros(&[1, 256]));
        let l = ce_loss(&mut g, cls, &[37]).unwrap();
        assert!((g.data(l)[0] - 256f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logit_drives_ce_to_zero() {
        let mut g = Graph::new();
        let cls = g.constant(Tensor::from_fn(&[1, 16], |i| if i == 3 { 60.0 } else { 0.0 }));
        let l = ce_loss(&mut g, cls, &[3]).unwrap();
        assert!(g.data(l)[0] < 1e-20);
    }

    #[test]
    fn identical_boxes_have_zero_siou() {
        let b = BoundingBox::new(3.0, 4.0, 10.0, 7.0);
        assert_eq!(siou_loss(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn far_disjoint_boxes_exceed_one() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BoundingBox::new(200.0, 150.0, 20.0, 5.0);
        assert!(siou_loss(&a, &b).unwrap() > 1.0);
    }

    #[test]
    fn zero_area_rejected() {
        let a = BoundingBox::new(0.0, 0.0, 0.0, 10.0);
        assert!(siou_loss(&a, &a).is_err());
    }
}
