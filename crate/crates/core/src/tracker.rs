//! Frame-by-frame tracking with confidence-gated dynamic template updates.

use nighttrack_autograd::Tensor;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::geometry::{crop_resize, BoundingBox, CropGeometry, Frame};
use crate::head::{decode_box, HeadOutput};
use crate::model::{Model, ModelInputs};
use crate::ntc::{calibrate, CalibrationDecision, OffsetStats};
use crate::params::{Forward, Mode};
use crate::patching::{CropKind, ImageCrop};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub static_template: ImageCrop,
    pub dynamic_template: ImageCrop,
    pub prev_box: BoundingBox,
    /// Index of the next frame to track (the init frame is 0).
    pub frame_index: usize,
    pub history: Vec<CalibrationDecision>,
}

impl TrackerState {
    pub fn update_count(&self) -> usize {
        self.history.iter().filter(|d| d.applied).count()
    }

    pub fn mean_confidence(&self) -> Option<f64> {
        (!self.history.is_empty())
            .then(|| self.history.iter().map(|d| d.s_c).sum::<f64>() / self.history.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerOptions {
    /// Apply in-band calibration decisions to the dynamic template.
    pub ntc_enabled: bool,
    /// Weight of a cosine window blended into the sigmoid score map before
    /// the peak is taken; 0 disables it.
    pub window_influence: f64,
}

impl Default for TrackerOptions {
    fn default() -> Self {
        Self {
            ntc_enabled: true,
            window_influence: 0.0,
        }
    }
}

/// `(1 − w)·σ(cls) + w·hann` over the `[G, G]` score map.
pub fn apply_window(cls: &Tensor, w: f64) -> Tensor {
    let g = cls.shape()[0];
    let hann = |i: usize| {
        if g == 1 {
            1.0
        } else {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / g as f64).cos()
        }
    };
    let mut out = cls.map(|v| (1.0 - w) / (1.0 + (-v).exp()));
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        *v += w * hann(k / g) * hann(k % g);
    }
    out
}

/// Template crop: `template_context × sqrt(w·h)` square around the box centre.
pub fn crop_template(frame: &Frame, b: &BoundingBox, cfg: &ModelConfig, kind: CropKind) -> Result<ImageCrop> {
    let (cx, cy) = b.center();
    let (pixels, _) = crop_resize(frame, cx, cy, b.context_side(cfg.template_context), cfg.template_size)?;
    ImageCrop::new(pixels, kind)
}

/// Search crop around the previous box and its crop-to-frame mapping.
pub fn crop_search(frame: &Frame, b: &BoundingBox, cfg: &ModelConfig) -> Result<(Tensor, CropGeometry)> {
    let (cx, cy) = b.center();
    crop_resize(frame, cx, cy, b.context_side(cfg.search_context), cfg.search_size)
}

/// Replace the dynamic template when the decision asks for it and log the
/// decision. The static template is never touched.
pub fn apply_update(mut state: TrackerState, mut decision: CalibrationDecision, new_crop: ImageCrop, enabled: bool) -> TrackerState {
    decision.applied = enabled && decision.update;
    if decision.applied {
        state.dynamic_template = ImageCrop {
            kind: CropKind::DynamicTemplate,
            ..new_crop
        };
    }
    state.history.push(decision);
    state
}

#[derive(Debug, Clone, Copy)]
pub struct Tracker<'m> {
    pub model: &'m Model,
    pub options: TrackerOptions,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, options: TrackerOptions) -> Self {
        Self { model, options }
    }

    /// Both templates come from frame 0 around `box0`, which must lie inside
    /// the frame with positive area.
    pub fn init(&self, frame: &Frame, box0: BoundingBox) -> Result<TrackerState> {
        box0.validate()?;
        if !box0.within(frame.width() as f64, frame.height() as f64) {
            return Err(CoreError::InvalidBox(format!(
                "initial box {box0:?} exceeds the {}x{} frame",
                frame.width(),
                frame.height()
            )));
        }
        let cfg = &self.model.cfg;
        let static_template = crop_template(frame, &box0, cfg, CropKind::StaticTemplate)?;
        let dynamic_template = ImageCrop {
            kind: CropKind::DynamicTemplate,
            ..static_template.clone()
        };
        Ok(TrackerState {
            static_template,
            dynamic_template,
            prev_box: box0,
            frame_index: 1,
            history: Vec::new(),
        })
    }

    /// Locate the target in `frame`, then run calibration and the optional
    /// template update. Returns the frame-clamped box.
    pub fn track_frame(&self, state: TrackerState, frame: &Frame) -> Result<(BoundingBox, TrackerState)> {
        let cfg = &self.model.cfg;
        let (search, geom) = crop_search(frame, &state.prev_box, cfg)?;
        let inputs = ModelInputs::stack(&[(&search, &state.static_template.pixels, &state.dynamic_template.pixels)])?;
        let mut f = Forward::new(&self.model.store, Mode::Eval).without_grad();
        let out = self.model.forward(&mut f, &inputs)?;
        let mut head = HeadOutput::from_vars(&f, &out.head, 0)?;
        if self.options.window_influence > 0.0 {
            head.cls = apply_window(&head.cls, self.options.window_influence);
        }
        let raw = decode_box(&head, &geom);
        if !raw.is_valid() {
            return Err(CoreError::Numerical(format!("decoded box {raw:?}")));
        }
        let (w, h) = (frame.width() as f64, frame.height() as f64);
        let pred = raw.clamp_to(w, h, 1.0);
        let s_c = f.g.data(out.score)[0];
        let decision = calibrate(s_c, OffsetStats::of(f.g.data(out.offset)), cfg.theta_low, cfg.theta_high)?;
        let new_crop = if self.options.ntc_enabled && decision.update {
            crop_template(frame, &pred, cfg, CropKind::DynamicTemplate)?
        } else {
            state.dynamic_template.clone()
        };
        let mut next = apply_update(state, decision, new_crop, self.options.ntc_enabled);
        next.prev_box = pred;
        next.frame_index += 1;
        Ok((pred, next))
    }

    /// Track a whole sequence from its first frame and box; returns one box
    /// per frame (the first is `box0`) and the final state.
    pub fn run(&self, frames: &[Frame], box0: BoundingBox) -> Result<(Vec<BoundingBox>, TrackerState)> {
        let first = frames
            .first()
            .ok_or_else(|| CoreError::shape("cannot track an empty sequence"))?;
        let mut state = self.init(first, box0)?;
        let mut boxes = vec![box0];
        for frame in &frames[1..] {
            let (b, next) = self.track_frame(state, frame)?;
            boxes.push(b);
            state = next;
        }
        Ok((boxes, state))
    }
}
