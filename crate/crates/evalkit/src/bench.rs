//! Throughput of the eval-mode tracker on a synthetic scene.

use std::time::Instant;

use nighttrack_core::synth::{generate, SceneSpec};
use nighttrack_core::tracker::{Tracker, TrackerOptions};
use nighttrack_core::{Model, ModelConfig};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub label: String,
    pub frames: usize,
    pub seconds: f64,
    pub tokens_per_frame: usize,
    pub frames_per_sec: f64,
    pub tokens_per_sec: f64,
}

/// Track `frames` synthetic frames (after the initialisation frame) with a
/// freshly initialised model and time the tracked frames only.
pub fn bench(label: &str, cfg: ModelConfig, frames: usize, seed: u64) -> Result<BenchResult> {
    let model = Model::new(cfg, seed)?;
    let scene = generate(&SceneSpec {
        frames: frames + 1,
        seed,
        ..SceneSpec::default()
    })?;
    let tracker = Tracker::new(&model, TrackerOptions::default());
    let mut state = tracker.init(&scene.frames[0], scene.boxes[0])?;
    let start = Instant::now();
    for f in &scene.frames[1..] {
        state = tracker.track_frame(state, f)?.1;
    }
    let seconds = start.elapsed().as_secs_f64();
    let tokens = model.cfg.total_tokens();
    Ok(BenchResult {
        label: label.to_string(),
        frames,
        seconds,
        tokens_per_frame: tokens,
        frames_per_sec: frames as f64 / seconds,
        tokens_per_sec: (tokens * frames) as f64 / seconds,
    })
}

impl std::fmt::Display for BenchResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} frames in {:.3} s, {:.2} frames/sec, {:.0} tokens/sec ({} tokens per frame)",
            self.label, self.frames, self.seconds, self.frames_per_sec, self.tokens_per_sec, self.tokens_per_frame
        )
    }
}
