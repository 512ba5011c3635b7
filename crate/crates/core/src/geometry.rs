//! Boxes, frames and context-expanded square crops.

use nighttrack_autograd::Tensor;

use crate::error::{CoreError, Result};

/// Axis-aligned box in pixels: top-left corner plus width and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(CoreError::InvalidBox(format!("{self:?} must be finite with positive area")))
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    /// Side of the square context region: `factor · sqrt(w·h)`.
    pub fn context_side(&self, factor: f64) -> f64 {
        factor * self.area().sqrt()
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }

    /// Clip to `[0,width]×[0,height]`, keeping at least `min_side` pixels per side.
    pub fn clamp_to(&self, width: f64, height: f64, min_side: f64) -> Self {
        let x1 = self.x.clamp(0.0, width);
        let y1 = self.y.clamp(0.0, height);
        let x2 = self.right().clamp(0.0, width);
        let y2 = self.bottom().clamp(0.0, height);
        let mut b = Self::new(x1, y1, x2 - x1, y2 - y1);
        if b.w < min_side {
            b.w = min_side.min(width);
            b.x = b.x.min(width - b.w);
        }
        if b.h < min_side {
            b.h = min_side.min(height);
            b.y = b.y.min(height - b.h);
        }
        b
    }
}

/// RGB frame with planar `[3, H, W]` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Tensor,
}

impl Frame {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.rank() != 3 || pixels.shape()[0] != 3 {
            return Err(CoreError::shape(format!(
                "frame pixels must be [3, H, W], got {:?}",
                pixels.shape()
            )));
        }
        Ok(Self { pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            pixels: Tensor::full(&[3, height, width], value),
        }
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Tensor {
        &mut self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        self.pixels.data()[(c * h + y) * w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.height(), self.width());
        self.pixels.data_mut()[(c * h + y) * w + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.data().iter().sum::<f64>() / self.pixels.numel() as f64
    }
}

/// Maps crop pixel coordinates back into the source frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropGeometry {
    /// Frame coordinates of the crop's top-left corner.
    pub origin_x: f64,
    pub origin_y: f64,
    /// Frame pixels per crop pixel.
    pub scale: f64,
    /// Crop side in crop pixels.
    pub size: usize,
}

impl CropGeometry {
    pub fn identity(size: usize) -> Self {
        Self {
            origin_x: 0.0,
            origin_y: 0.0,
            scale: 1.0,
            size,
        }
    }

    pub fn to_frame(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox::new(
            self.origin_x + b.x * self.scale,
            self.origin_y + b.y * self.scale,
            b.w * self.scale,
            b.h * self.scale,
        )
    }

    pub fn to_crop(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox::new(
            (b.x - self.origin_x) / self.scale,
            (b.y - self.origin_y) / self.scale,
            b.w / self.scale,
            b.h / self.scale,
        )
    }
}

/// Square crop of side `side` (frame pixels) centred at `(cx, cy)`,
/// bilinearly resampled to `out × out`. Samples falling outside the frame
/// take the per-channel mean of the in-frame pixels under the crop window
/// (the whole-frame mean when the window misses the frame entirely).
pub fn crop_resize(frame: &Frame, cx: f64, cy: f64, side: f64, out: usize) -> Result<(Tensor, CropGeometry)> {
    if !(side > 0.0 && side.is_finite() && cx.is_finite() && cy.is_finite()) || out == 0 {
        return Err(CoreError::InvalidBox(format!(
            "crop centre ({cx}, {cy}) side {side} out {out}"
        )));
    }
    let (w, h) = (frame.width(), frame.height());
    let geom = CropGeometry {
        origin_x: cx - side / 2.0,
        origin_y: cy - side / 2.0,
        scale: side / out as f64,
        size: out,
    };
    let pad = window_mean(frame, geom.origin_x, geom.origin_y, side);
    let mut data = vec![0.0; 3 * out * out];
    for v in 0..out {
        // pixel-centre convention: crop pixel centre (v + 0.5) maps to frame centre coordinate
        let fy = geom.origin_y + (v as f64 + 0.5) * geom.scale - 0.5;
        let y0 = fy.floor();
        let ty = fy - y0;
        for u in 0..out {
            let fx = geom.origin_x + (u as f64 + 0.5) * geom.scale - 0.5;
            let x0 = fx.floor();
            let tx = fx - x0;
            for c in 0..3 {
                let sample = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        pad[c]
                    } else {
                        frame.get(c, yy as usize, xx as usize)
                    }
                };
                let top = sample(y0, x0) * (1.0 - tx) + sample(y0, x0 + 1.0) * tx;
                let bot = sample(y0 + 1.0, x0) * (1.0 - tx) + sample(y0 + 1.0, x0 + 1.0) * tx;
                data[(c * out + v) * out + u] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Ok((Tensor::new(vec![3, out, out], data)?, geom))
}

fn window_mean(frame: &Frame, x0: f64, y0: f64, side: f64) -> [f64; 3] {
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    let xs = (x0.max(0.0).ceil() as usize, (x0 + side).min(w).ceil().max(0.0) as usize);
    let ys = (y0.max(0.0).ceil() as usize, (y0 + side).min(h).ceil().max(0.0) as usize);
    let mut sums = [0.0; 3];
    let mut count = 0usize;
    for y in ys.0..ys.1.min(frame.height()) {
        for x in xs.0..xs.1.min(frame.width()) {
            for (c, s) in sums.iter_mut().enumerate() {
                *s += frame.get(c, y, x);
            }
            count += 1;
        }
    }
    if count == 0 {
        let n = (frame.width() * frame.height()) as f64;
        let mut m = [0.0; 3];
        for (c, mc) in m.iter_mut().enumerate() {
            *mc = (0..frame.height())
                .flat_map(|y| (0..frame.width()).map(move |x| (y, x)))
                .map(|(y, x)| frame.get(c, y, x))
                .sum::<f64>()
                / n;
        }
        return m;
    }
    sums.map(|s| s / count as f64)
}
