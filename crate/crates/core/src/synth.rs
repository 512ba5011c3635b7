//! Deterministic synthetic night scenes: a dark flat background, one target
//! blob following a spline, static distractors, additive Gaussian noise and
//! declared occlusion windows. Pixels are quantised to 8-bit levels so a
//! sequence survives a round trip through lossless image files unchanged.

use std::ops::Range;

use nighttrack_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::geometry::{BoundingBox, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobShape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub shape: BlobShape,
    /// Width is drawn once per sequence from this range (pixels).
    pub width_range: (f64, f64),
    pub height_range: (f64, f64),
    /// RGB intensity at full illumination, each in `(0, 1]`.
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistractorSpec {
    pub count: usize,
    pub width: f64,
    pub height: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub object: ObjectSpec,
    /// Object-centre waypoints, visited at evenly spaced frames along a
    /// Catmull-Rom spline.
    pub waypoints: Vec<(f64, f64)>,
    /// Standard deviation of per-frame Gaussian jitter on the centre.
    pub jitter: f64,
    /// Scene brightness in `(0, 1]`; the background mean is `0.15 ×` this.
    pub illumination: f64,
    pub noise_sigma: f64,
    pub distractors: DistractorSpec,
    /// Frame ranges during which the object is hidden behind an occluder.
    pub occlusions: Vec<Range<usize>>,
    pub seed: u64,
}

impl Default for SceneSpec {
    /// A 30-frame, 128×96 scene with a slowly drifting rectangle.
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            frames: 30,
            object: ObjectSpec {
                shape: BlobShape::Rect,
                width_range: (14.0, 14.0),
                height_range: (12.0, 12.0),
                color: [0.9, 0.8, 0.5],
            },
            waypoints: vec![(44.0, 46.0), (62.0, 42.0), (80.0, 50.0)],
            jitter: 0.5,
            illumination: 0.6,
            noise_sigma: 0.02,
            distractors: DistractorSpec {
                count: 2,
                width: 6.0,
                height: 6.0,
                color: [0.35, 0.35, 0.45],
            },
            occlusions: Vec::new(),
            seed: 0,
        }
    }
}

/// Rendered frames with their exact target boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<Frame>,
    pub boxes: Vec<BoundingBox>,
    pub occluded: Vec<bool>,
}

const BACKGROUND_LEVEL: f64 = 0.15;
const OCCLUDER_COLOR: [f64; 3] = [0.2, 0.3, 0.25];

fn in_unit(v: f64) -> bool {
    v > 0.0 && v <= 1.0
}

impl SceneSpec {
    fn is_occluded(&self, t: usize) -> bool {
        self.occlusions.iter().any(|r| r.contains(&t))
    }

    /// Set one `synth.`-prefixed key; returns `false` for keys it does not
    /// own. Lists use `;` separators: `waypoints = 40:30; 60:35`,
    /// `occlusions = 10-14; 20-22` (half-open frame ranges).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("synth.") else {
            return Ok(false);
        };
        let bad = || CoreError::config(format!("{key}: cannot parse {value:?}"));
        let f = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let u = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        let items = || value.split(';').map(str::trim).filter(|s| !s.is_empty());
        match k {
            "width" => self.width = u(value)?,
            "height" => self.height = u(value)?,
            "frames" => self.frames = u(value)?,
            "seed" => self.seed = value.trim().parse().map_err(|_| bad())?,
            "illumination" => self.illumination = f(value)?,
            "noise_sigma" => self.noise_sigma = f(value)?,
            "jitter" => self.jitter = f(value)?,
            "shape" => {
                self.object.shape = match value.trim() {
                    "rect" => BlobShape::Rect,
                    "ellipse" => BlobShape::Ellipse,
                    _ => return Err(bad()),
                }
            }
            "object_width" => {
                let v = f(value)?;
                self.object.width_range = (v, v);
            }
            "object_height" => {
                let v = f(value)?;
                self.object.height_range = (v, v);
            }
            "distractors" => self.distractors.count = u(value)?,
            "waypoints" => {
                self.waypoints = items()
                    .map(|p| {
                        let (x, y) = p.split_once(':').ok_or_else(bad)?;
                        Ok((f(x)?, f(y)?))
                    })
                    .collect::<Result<_>>()?
            }
            "occlusions" => {
                self.occlusions = items()
                    .map(|p| {
                        let (a, b) = p.split_once('-').ok_or_else(bad)?;
                        Ok(u(a)?..u(b)?)
                    })
                    .collect::<Result<_>>()?
            }
            _ => return Err(CoreError::config(format!("unknown key {key}"))),
        }
        Ok(true)
    }

    /// Every violated constraint, or `Ok` when the scene can be rendered.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.width < 8 || self.height < 8 {
            errs.push(format!("frame size {}x{} is below 8x8", self.width, self.height));
        }
        if self.frames == 0 {
            errs.push("frame count must be positive".into());
        }
        let o = &self.object;
        for (name, (lo, hi)) in [("width", o.width_range), ("height", o.height_range)] {
            if !(lo >= 1.0 && lo <= hi && hi.is_finite()) {
                errs.push(format!("object {name} range ({lo}, {hi}) must satisfy 1 <= min <= max"));
            }
        }
        if !o.color.iter().all(|&c| in_unit(c)) {
            errs.push(format!("object color {:?} must lie in (0, 1]", o.color));
        }
        if self.waypoints.is_empty() {
            errs.push("at least one waypoint is required".into());
        }
        if self.waypoints.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            errs.push("waypoints must be finite".into());
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            errs.push(format!("jitter {} must be finite and non-negative", self.jitter));
        }
        if !in_unit(self.illumination) {
            errs.push(format!("illumination {} must lie in (0, 1]", self.illumination));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            errs.push(format!("noise sigma {} must be finite and non-negative", self.noise_sigma));
        }
        let d = &self.distractors;
        if d.count > 0 {
            if !(d.width >= 1.0 && d.height >= 1.0) {
                errs.push(format!("distractor size {}x{} must be at least 1x1", d.width, d.height));
            }
            if !d.color.iter().all(|&c| in_unit(c)) {
                errs.push(format!("distractor color {:?} must lie in (0, 1]", d.color));
            }
        }
        for r in &self.occlusions {
            if r.start >= r.end || r.end > self.frames {
                errs.push(format!("occlusion window {r:?} must be non-empty and within {} frames", self.frames));
            } else if r.start == 0 {
                errs.push("frame 0 cannot be occluded".into());
            }
        }
        if errs.is_empty() {
            let (w, h) = (self.width as f64, self.height as f64);
            for (t, b) in self.nominal_boxes().iter().enumerate() {
                if self.is_occluded(t) {
                    continue;
                }
                let ix = (b.right().min(w) - b.x.max(0.0)).max(0.0);
                let iy = (b.bottom().min(h) - b.y.max(0.0)).max(0.0);
                if ix * iy < 0.5 * b.area() {
                    errs.push(format!("object is less than half inside the frame at frame {t}"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CoreError::InvalidSpec(errs))
        }
    }

    /// Object size and per-frame centres (spline plus jitter), before rasterising.
    fn layout(&self) -> (f64, f64, Vec<(f64, f64)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let w = draw(&mut rng, self.object.width_range);
        let h = draw(&mut rng, self.object.height_range);
        let jitter = Normal::new(0.0, self.jitter.max(0.0)).expect("finite sigma");
        let centres = (0..self.frames)
            .map(|t| {
                let (x, y) = spline(&self.waypoints, t, self.frames);
                if self.jitter > 0.0 {
                    (x + jitter.sample(&mut rng), y + jitter.sample(&mut rng))
                } else {
                    (x, y)
                }
            })
            .collect();
        (w, h, centres)
    }

    fn nominal_boxes(&self) -> Vec<BoundingBox> {
        let (w, h, centres) = self.layout();
        centres
            .into_iter()
            .map(|(cx, cy)| BoundingBox::from_center(cx, cy, w, h))
            .collect()
    }
}

/// Catmull-Rom interpolation through `points`, reaching the last one at the
/// final frame.
fn spline(points: &[(f64, f64)], t: usize, frames: usize) -> (f64, f64) {
    if points.len() == 1 || frames <= 1 {
        return points[0];
    }
    let u = t as f64 / (frames - 1) as f64 * (points.len() - 1) as f64;
    let i = (u.floor() as usize).min(points.len() - 2);
    let s = u - i as f64;
    let at = |k: isize| points[k.clamp(0, points.len() as isize - 1) as usize];
    let (p0, p1, p2, p3) = (at(i as isize - 1), at(i as isize), at(i as isize + 1), at(i as isize + 2));
    let cr = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * (2.0 * b + (c - a) * s + (2.0 * a - 5.0 * b + 4.0 * c - d) * s * s + (3.0 * b - a - 3.0 * c + d) * s * s * s)
    };
    (cr(p0.0, p1.0, p2.0, p3.0), cr(p0.1, p1.1, p2.1, p3.1))
}

/// Integer pixel mask of a blob; rectangles cover `[round(x), round(x) + round(w))`,
/// ellipses the pixels whose centres fall inside.
fn blob_pixels(shape: BlobShape, b: &BoundingBox, width: usize, height: usize) -> Vec<(usize, usize)> {
    let x0 = b.x.round().max(0.0) as usize;
    let y0 = b.y.round().max(0.0) as usize;
    let x1 = ((b.x.round() + b.w.round()).min(width as f64)).max(0.0) as usize;
    let y1 = ((b.y.round() + b.h.round()).min(height as f64)).max(0.0) as usize;
    let (cx, cy) = b.center();
    let (rx, ry) = (b.w / 2.0, b.h / 2.0);
    let mut out = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let inside = match shape {
                BlobShape::Rect => true,
                BlobShape::Ellipse => {
                    let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                    dx * dx + dy * dy <= 1.0
                }
            };
            if inside {
                out.push((x, y));
            }
        }
    }
    out
}

fn mask_box(pixels: &[(usize, usize)]) -> Option<BoundingBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &(x, y) in pixels {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    (!pixels.is_empty()).then(|| BoundingBox::new(x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64))
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Render `scene`. Boxes are the bounding rectangles of the object's render
/// mask; during occlusions the mask is still computed (and reported as the
/// box) but the object is not drawn and an occluder covers its box.
pub fn generate(scene: &SceneSpec) -> Result<SyntheticSequence> {
    scene.validate()?;
    let (w, h) = (scene.width, scene.height);
    let (ow, oh, centres) = scene.layout();
    // A separate stream so distractor placement does not shift when the
    // trajectory changes.
    let mut place = ChaCha8Rng::seed_from_u64(scene.seed);
    place.set_stream(1);
    let d = &scene.distractors;
    let distractors: Vec<BoundingBox> = (0..d.count)
        .map(|_| {
            let x = place.random_range(0.0..(w as f64 - d.width).max(1.0));
            let y = place.random_range(0.0..(h as f64 - d.height).max(1.0));
            BoundingBox::new(x, y, d.width, d.height)
        })
        .collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(scene.seed);
    noise_rng.set_stream(2);
    let noise = Normal::new(0.0, scene.noise_sigma).expect("validated sigma");
    let illum = scene.illumination;

    let mut seq = SyntheticSequence {
        frames: Vec::with_capacity(scene.frames),
        boxes: Vec::with_capacity(scene.frames),
        occluded: Vec::with_capacity(scene.frames),
    };
    for (t, &(cx, cy)) in centres.iter().enumerate() {
        let mut img = vec![BACKGROUND_LEVEL * illum; 3 * h * w];
        let mut paint = |pixels: &[(usize, usize)], color: [f64; 3]| {
            for &(x, y) in pixels {
                for (c, v) in color.iter().enumerate() {
                    img[(c * h + y) * w + x] = v * illum;
                }
            }
        };
        for b in &distractors {
            paint(&blob_pixels(BlobShape::Rect, b, w, h), d.color);
        }
        let nominal = BoundingBox::from_center(cx, cy, ow, oh);
        let mask = blob_pixels(scene.object.shape, &nominal, w, h);
        let gt = mask_box(&mask).ok_or_else(|| {
            CoreError::InvalidSpec(vec![format!("object has no pixels inside the frame at frame {t}")])
        })?;
        let occluded = scene.is_occluded(t);
        if occluded {
            paint(&blob_pixels(BlobShape::Rect, &gt, w, h), OCCLUDER_COLOR);
        } else {
            paint(&mask, scene.object.color);
        }
        if scene.noise_sigma > 0.0 {
            img.iter_mut().for_each(|v| *v += noise.sample(&mut noise_rng));
        }
        img.iter_mut().for_each(|v| *v = quantize(*v));
        seq.frames.push(Frame::new(Tensor::new(vec![3, h, w], img)?)?);
        seq.boxes.push(gt);
        seq.occluded.push(occluded);
    }
    Ok(seq)
}
