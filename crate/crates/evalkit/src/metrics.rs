//! Centre error, overlap and the one-pass precision/success curves.
//!
//! Normalised precision divides the centre error by the groundtruth
//! diagonal `sqrt(w² + h²)`. A frame succeeds at threshold `t` when its
//! IoU is at least `t` and positive, so a perfect box counts at `t = 1` and
//! a disjoint one fails even at `t = 0`. AUC is the plain mean of the 21
//! success samples at `t = 0, 0.05, ..., 1`.

use nighttrack_core::BoundingBox;

use crate::error::{EvalError, Result};

pub const PRECISION_POINTS: usize = 51;
pub const NORM_PRECISION_POINTS: usize = 51;
pub const SUCCESS_POINTS: usize = 21;
/// Curve index of the reported operating points: 20 px and 0.2.
pub const P_INDEX: usize = 20;
pub const P_NORM_INDEX: usize = 20;

/// Pixel threshold of precision sample `i` (`0..=50`).
pub fn precision_threshold(i: usize) -> f64 {
    i as f64
}

/// Normalised threshold of sample `i` (`0, 0.01, ..., 0.5`).
pub fn norm_threshold(i: usize) -> f64 {
    i as f64 / 100.0
}

/// IoU threshold of success sample `i` (`0, 0.05, ..., 1`).
pub fn success_threshold(i: usize) -> f64 {
    i as f64 / 20.0
}

pub fn cle(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let (a, b) = (pred.center(), gt.center());
    (a.0 - b.0).hypot(a.1 - b.1)
}

pub fn normalized_error(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    cle(pred, gt) / gt.w.hypot(gt.h)
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).min(1.0)
    } else {
        0.0
    }
}

/// Per-threshold frame counts. Counts add across sequences, so pooled
/// metrics do not depend on evaluation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameCounts {
    pub frames: usize,
    pub precision: [usize; PRECISION_POINTS],
    pub norm_precision: [usize; NORM_PRECISION_POINTS],
    pub success: [usize; SUCCESS_POINTS],
}

impl Default for FrameCounts {
    fn default() -> Self {
        Self {
            frames: 0,
            precision: [0; PRECISION_POINTS],
            norm_precision: [0; NORM_PRECISION_POINTS],
            success: [0; SUCCESS_POINTS],
        }
    }
}

impl FrameCounts {
    pub fn add_frame(&mut self, pred: &BoundingBox, gt: &BoundingBox) {
        let (e, ne, o) = (cle(pred, gt), normalized_error(pred, gt), iou(pred, gt));
        self.frames += 1;
        for (i, c) in self.precision.iter_mut().enumerate() {
            *c += usize::from(e <= precision_threshold(i));
        }
        for (i, c) in self.norm_precision.iter_mut().enumerate() {
            *c += usize::from(ne <= norm_threshold(i));
        }
        for (i, c) in self.success.iter_mut().enumerate() {
            *c += usize::from(o > 0.0 && o >= success_threshold(i));
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.frames += other.frames;
        let add = |a: &mut [usize], b: &[usize]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.precision, &other.precision);
        add(&mut self.norm_precision, &other.norm_precision);
        add(&mut self.success, &other.success);
    }

    pub fn metrics(&self) -> Metrics {
        let n = self.frames.max(1) as f64;
        let frac = |c: &[usize]| c.iter().map(|&k| k as f64 / n).collect::<Vec<_>>();
        let curves = MetricCurves {
            precision: frac(&self.precision),
            norm_precision: frac(&self.norm_precision),
            success: frac(&self.success),
        };
        Metrics {
            frames: self.frames,
            p: curves.precision[P_INDEX],
            p_norm: curves.norm_precision[P_NORM_INDEX],
            auc: curves.success.iter().sum::<f64>() / SUCCESS_POINTS as f64,
            curves,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricCurves {
    pub precision: Vec<f64>,
    pub norm_precision: Vec<f64>,
    pub success: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub frames: usize,
    pub p: f64,
    pub p_norm: f64,
    pub auc: f64,
    pub curves: MetricCurves,
}

pub fn count_frames(preds: &[BoundingBox], gts: &[BoundingBox]) -> Result<FrameCounts> {
    if preds.len() != gts.len() {
        return Err(EvalError::Mismatch(format!(
            "{} predictions for {} groundtruth boxes",
            preds.len(),
            gts.len()
        )));
    }
    for b in preds.iter().chain(gts) {
        b.validate()?;
    }
    let mut c = FrameCounts::default();
    for (p, g) in preds.iter().zip(gts) {
        c.add_frame(p, g);
    }
    Ok(c)
}

pub fn compute_metrics(preds: &[BoundingBox], gts: &[BoundingBox]) -> Result<Metrics> {
    Ok(count_frames(preds, gts)?.metrics())
}

/// Text block describing the metric definitions, written at the top of
/// every report.
pub fn report_header() -> String {
    [
        "# P: fraction of frames with centre location error <= 20 px (curve: 0..50 px, step 1)",
        "# P_Norm: fraction of frames with centre error / sqrt(gt_w^2 + gt_h^2) <= 0.2 (curve: 0..0.5, step 0.01)",
        "# AUC: unweighted mean of the success rate (IoU >= t and IoU > 0) over t = 0, 0.05, ..., 1 (21 samples)",
        "# Pooled figures count every frame of every sequence once; frame 0 (the initialisation box) is included.",
    ]
    .join("\n")
        + "\n"
}
