use nighttrack_core::synth::{generate, SceneSpec};
use nighttrack_core::tracker::{Tracker, TrackerOptions};
use nighttrack_core::train::{train, TrainConfig, TrainSequence};
use nighttrack_core::{BoundingBox, Model, ModelConfig};

fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    iw * ih / (a.w * a.h + b.w * b.h - iw * ih)
}

fn overfit_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        iterations,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

/// Two identical noise-free frames and no crop jitter: the batch is the
/// same every iteration, so only the gate noise varies.
#[test]
fn smoothed_loss_decreases_over_the_first_50_iterations() {
    let seq = generate(&SceneSpec {
        frames: 2,
        waypoints: vec![(60.0, 45.0)],
        jitter: 0.0,
        noise_sigma: 0.0,
        ..SceneSpec::default()
    })
    .unwrap();
    let data = vec![TrainSequence::new(seq.frames, seq.boxes).unwrap()];
    let mut model = Model::new(ModelConfig::tiny(), 7).unwrap();
    let cfg = TrainConfig {
        lr: 3e-4,
        batch_size: 2,
        center_jitter: 0.0,
        scale_jitter: 0.0,
        ..overfit_config(50)
    };
    let report = train(&mut model, &data, &cfg, |_| {}).unwrap();
    let losses: Vec<f64> = report.records.iter().map(|r| r.loss).collect();
    let smoothed: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, w) in smoothed.windows(2).enumerate() {
        assert!(w[1] < w[0], "window ending at {} rose: {} -> {}", i + 10, w[0], w[1]);
    }
}

/// The search crop is centred on the previous box, so a stationary object
/// always sits on the corner of four cells; wide centre jitter teaches the
/// head to tell them apart.
#[test]
fn stationary_object_is_tracked_after_overfitting() {
    let seq = generate(&SceneSpec {
        waypoints: vec![(60.0, 45.0)],
        jitter: 0.0,
        ..SceneSpec::default()
    })
    .unwrap();
    let data = vec![TrainSequence::new(seq.frames.clone(), seq.boxes.clone()).unwrap()];
    let mut model = Model::new(ModelConfig::tiny(), 7).unwrap();
    let cfg = TrainConfig {
        center_jitter: 1.0,
        ..overfit_config(800)
    };
    train(&mut model, &data, &cfg, |_| {}).unwrap();
    let (boxes, _) = Tracker::new(&model, TrackerOptions::default())
        .run(&seq.frames, seq.boxes[0])
        .unwrap();
    let ious: Vec<f64> = boxes.iter().zip(&seq.boxes).map(|(p, g)| iou(p, g)).collect();
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    assert!(mean > 0.8, "mean IoU {mean}");
    for (i, (p, g)) in boxes.iter().zip(&seq.boxes).enumerate() {
        let (a, b) = (p.center(), g.center());
        assert!((a.0 - b.0).hypot(a.1 - b.1) < 3.0, "frame {i}: {p:?} vs {g:?}");
    }
}
