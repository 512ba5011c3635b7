//! Precision and success curves rendered side by side as a PNG. No text:
//! the x axes span 0..50 px and 0..1 IoU, the y axes 0..1.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{EvalError, Result};
use crate::metrics::MetricCurves;

const PANEL: u32 = 320;
const MARGIN: u32 = 24;

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn panel(img: &mut RgbImage, left: u32, values: &[f64], color: Rgb<u8>) {
    let span = (PANEL - 2 * MARGIN) as f64;
    let to_px = |i: usize, v: f64| {
        let x = left + MARGIN + (span * i as f64 / (values.len() - 1) as f64).round() as u32;
        let y = PANEL - MARGIN - (span * v.clamp(0.0, 1.0)).round() as u32;
        (i64::from(x), i64::from(y))
    };
    let axis = Rgb([90, 90, 90]);
    let origin = (i64::from(left + MARGIN), i64::from(PANEL - MARGIN));
    line(img, origin, (i64::from(left + PANEL - MARGIN), origin.1), axis);
    line(img, origin, (origin.0, i64::from(MARGIN)), axis);
    for w in values.windows(2).enumerate() {
        let (i, pair) = w;
        line(img, to_px(i, pair[0]), to_px(i + 1, pair[1]), color);
    }
}

pub fn render(curves: &MetricCurves) -> RgbImage {
    let mut img = RgbImage::from_pixel(2 * PANEL, PANEL, Rgb([255, 255, 255]));
    panel(&mut img, 0, &curves.precision, Rgb([200, 40, 40]));
    panel(&mut img, PANEL, &curves.success, Rgb([40, 80, 200]));
    img
}

pub fn save(curves: &MetricCurves, path: &Path) -> Result<()> {
    render(curves).save(path).map_err(|source| EvalError::Image {
        path: path.to_path_buf(),
        source,
    })
}
