use nighttrack_core::checkpoint::{load, save};
use nighttrack_core::synth::{generate, SceneSpec};
use nighttrack_core::tracker::{Tracker, TrackerOptions};
use nighttrack_core::{Model, ModelConfig};

fn scene(frames: usize) -> nighttrack_core::synth::SyntheticSequence {
    generate(&SceneSpec {
        frames,
        ..SceneSpec::default()
    })
    .unwrap()
}

#[test]
fn reloaded_checkpoint_tracks_identically() {
    let model = Model::new(ModelConfig::tiny(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.ckpt");
    save(&model, &path).unwrap();
    let back = load(&path).unwrap();
    let s = scene(6);
    let run = |m: &Model| Tracker::new(m, TrackerOptions::default()).run(&s.frames, s.boxes[0]).unwrap();
    assert_eq!(run(&model), run(&back));
}

#[test]
fn static_template_never_changes() {
    let model = Model::new(ModelConfig::tiny(), 8).unwrap();
    let s = scene(40);
    let t = Tracker::new(&model, TrackerOptions::default());
    let mut state = t.init(&s.frames[0], s.boxes[0]).unwrap();
    let initial = state.static_template.clone();
    for frame in &s.frames[1..] {
        state = t.track_frame(state, frame).unwrap().1;
        assert_eq!(state.static_template, initial);
    }
}

#[test]
fn disabled_calibration_keeps_the_first_dynamic_template() {
    let model = Model::new(ModelConfig::tiny(), 9).unwrap();
    let s = scene(10);
    let t = Tracker::new(&model, TrackerOptions {
        ntc_enabled: false,
        ..TrackerOptions::default()
    });
    let first = t.init(&s.frames[0], s.boxes[0]).unwrap().dynamic_template;
    let (_, state) = t.run(&s.frames, s.boxes[0]).unwrap();
    assert_eq!(state.dynamic_template, first);
    assert_eq!(state.dynamic_template.pixels, state.static_template.pixels);
    assert_eq!(state.update_count(), 0);
    assert_eq!(state.history.len(), 9);
}

#[test]
fn tracking_is_causal() {
    let model = Model::new(ModelConfig::tiny(), 10).unwrap();
    let s = scene(12);
    let t = Tracker::new(&model, TrackerOptions::default());
    let (full, _) = t.run(&s.frames, s.boxes[0]).unwrap();
    let mut altered = s.frames.clone();
    for f in &mut altered[7..] {
        *f = nighttrack_core::Frame::filled(f.width(), f.height(), 0.9);
    }
    let (prefix, _) = t.run(&altered, s.boxes[0]).unwrap();
    assert_eq!(full[..7], prefix[..7]);
    assert_ne!(full[7..], prefix[7..]);
}
