//! On-disk sequences: numbered frames (PNG, or PPM as a fallback), a
//! `groundtruth.txt` with one `x,y,w,h` line per frame and an optional
//! `occlusion.txt` with one `0`/`1` flag per frame.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use nighttrack_autograd::Tensor;
use nighttrack_core::{BoundingBox, Frame};

use crate::error::{EvalError, Result};

pub const GROUNDTRUTH: &str = "groundtruth.txt";
pub const OCCLUSION: &str = "occlusion.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    Png,
    Ppm,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Png => "png",
            Self::Ppm => "ppm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOnDisk {
    pub name: String,
    pub dir: PathBuf,
    pub frame_paths: Vec<PathBuf>,
    pub groundtruth: Vec<BoundingBox>,
    pub occluded: Option<Vec<bool>>,
}

/// A sequence with its frames decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub groundtruth: Vec<BoundingBox>,
    pub occluded: Option<Vec<bool>>,
}

fn is_frame(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

/// Parse `x,y,w,h` lines. Commas, tabs and spaces are all accepted as
/// separators; blank lines are skipped.
pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<BoundingBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| EvalError::data(path, format!("line {}: {e}", n + 1)))?;
        if vals.len() != 4 || vals.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::data(path, format!("line {}: expected four finite numbers", n + 1)));
        }
        out.push(BoundingBox::new(vals[0], vals[1], vals[2], vals[3]));
    }
    Ok(out)
}

/// One `x,y,w,h` line per box. `f64` display is the shortest string that
/// parses back to the same value, so the round trip is exact.
pub fn format_boxes(boxes: &[BoundingBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{},{},{},{}", b.x, b.y, b.w, b.h);
    }
    s
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoundingBox>> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::data(path, e.to_string()))?;
    parse_boxes(&text, path)
}

pub fn write_boxes(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    fs::write(path, format_boxes(boxes))?;
    Ok(())
}

fn parse_flags(text: &str, path: &Path) -> Result<Vec<bool>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(n, l)| match l {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(EvalError::data(path, format!("line {}: flag {other:?} is not 0 or 1", n + 1))),
        })
        .collect()
}

impl SequenceOnDisk {
    /// Index a sequence directory without decoding frames.
    pub fn open(dir: &Path) -> Result<Self> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let mut frame_paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| EvalError::data(dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_frame(p))
            .collect();
        frame_paths.sort();
        let groundtruth = read_boxes(&dir.join(GROUNDTRUTH))?;
        if groundtruth.len() != frame_paths.len() {
            return Err(EvalError::data(
                dir,
                format!("{} frames but {} groundtruth lines", frame_paths.len(), groundtruth.len()),
            ));
        }
        if groundtruth.is_empty() {
            return Err(EvalError::data(dir, "sequence has no frames"));
        }
        let occ_path = dir.join(OCCLUSION);
        let occluded = if occ_path.exists() {
            let flags = parse_flags(&fs::read_to_string(&occ_path)?, &occ_path)?;
            if flags.len() != groundtruth.len() {
                return Err(EvalError::data(&occ_path, format!("{} flags for {} frames", flags.len(), groundtruth.len())));
            }
            Some(flags)
        } else {
            None
        };
        Ok(Self {
            name,
            dir: dir.to_path_buf(),
            frame_paths,
            groundtruth,
            occluded,
        })
    }

    pub fn load(&self) -> Result<LoadedSequence> {
        Ok(LoadedSequence {
            name: self.name.clone(),
            frames: self.frame_paths.iter().map(|p| read_frame(p)).collect::<Result<_>>()?,
            groundtruth: self.groundtruth.clone(),
            occluded: self.occluded.clone(),
        })
    }
}

/// Indexed sequences and the directories that failed to index.
pub type Discovered = (Vec<SequenceOnDisk>, Vec<(PathBuf, EvalError)>);

/// Every subdirectory of `root` holding a `groundtruth.txt`, sorted by
/// name, plus the directories that failed to index.
pub fn discover(root: &Path) -> Result<Discovered> {
    if root.join(GROUNDTRUTH).is_file() {
        return Ok((vec![SequenceOnDisk::open(root)?], Vec::new()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| EvalError::data(root, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join(GROUNDTRUTH).is_file())
        .collect();
    dirs.sort();
    let (mut ok, mut bad) = (Vec::new(), Vec::new());
    for d in dirs {
        match SequenceOnDisk::open(&d) {
            Ok(s) => ok.push(s),
            Err(e) => bad.push((d, e)),
        }
    }
    Ok((ok, bad))
}

/// Decode an 8-bit RGB image into `[0, 1]` planar pixels.
pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|source| EvalError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(Frame::new(Tensor::new(vec![3, h, w], data).map_err(nighttrack_core::CoreError::from)?)?)
}

/// Quantise to 8 bits and encode by the path's extension.
pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let (w, h) = (frame.width(), frame.height());
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |c| (frame.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    });
    let format = ImageFormat::from_path(path).map_err(|source| EvalError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    img.save_with_format(path, format).map_err(|source| EvalError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Write `frames` as `00000001.<ext>`, ... plus the groundtruth and, when
/// given, the occlusion flags.
pub fn write_sequence(
    dir: &Path,
    frames: &[Frame],
    boxes: &[BoundingBox],
    occluded: Option<&[bool]>,
    format: FrameFormat,
) -> Result<()> {
    if frames.len() != boxes.len() {
        return Err(EvalError::Mismatch(format!("{} frames but {} boxes", frames.len(), boxes.len())));
    }
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(format!("{:08}.{}", i + 1, format.extension())), f)?;
    }
    write_boxes(&dir.join(GROUNDTRUTH), boxes)?;
    if let Some(flags) = occluded {
        let text: String = flags.iter().map(|&o| if o { "1\n" } else { "0\n" }).collect();
        fs::write(dir.join(OCCLUSION), text)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separators_and_blank_lines() {
        let b = parse_boxes("1,2,3,4\n\n5\t6 7,8\n", Path::new("gt")).unwrap();
        assert_eq!(b, vec![BoundingBox::new(1.0, 2.0, 3.0, 4.0), BoundingBox::new(5.0, 6.0, 7.0, 8.0)]);
        assert!(parse_boxes("1,2,3\n", Path::new("gt")).is_err());
        assert!(parse_boxes("1,2,3,x\n", Path::new("gt")).is_err());
    }

    #[test]
    fn awkward_floats_round_trip() {
        let boxes = vec![BoundingBox::new(0.1 + 0.2, 1.0 / 3.0, 1e-300, 123456.789e10)];
        assert_eq!(parse_boxes(&format_boxes(&boxes), Path::new("r")).unwrap(), boxes);
    }

    #[test]
    fn frames_round_trip_through_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Frame::new(Tensor::from_fn(&[3, 5, 7], |i| (i % 256) as f64 / 255.0)).unwrap();
        for fmt in [FrameFormat::Png, FrameFormat::Ppm] {
            let p = dir.path().join(format!("f.{}", fmt.extension()));
            write_frame(&p, &frame).unwrap();
            assert_eq!(read_frame(&p).unwrap(), frame);
        }
    }

    #[test]
    fn count_mismatch_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Frame::filled(4, 4, 0.5);
        let b = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        write_sequence(dir.path(), &[frame.clone(), frame], &[b, b], Some(&[false, true]), FrameFormat::Png).unwrap();
        let s = SequenceOnDisk::open(dir.path()).unwrap();
        assert_eq!(s.occluded, Some(vec![false, true]));
        fs::write(dir.path().join(GROUNDTRUTH), "0,0,2,2\n").unwrap();
        let e = SequenceOnDisk::open(dir.path()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
