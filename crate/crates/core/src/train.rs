//! Toy training loop: AdamW on the classification plus box loss over
//! search crops sampled from labelled sequences.

use std::fmt::Write as _;
use std::path::PathBuf;

use nighttrack_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::parse_kv;
use crate::error::{CoreError, Result};
use crate::geometry::{crop_resize, BoundingBox, Frame};
use crate::head::{encode_target, Target, BN_MOMENTUM};
use crate::loss::LossWeights;
use crate::model::{Model, ModelInputs, Stage};
use crate::params::{Forward, Gradients, Mode, ParamId, ParamStore};
use crate::tracker::crop_template;
use crate::patching::CropKind;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Fraction of `iterations` after which the learning rate is multiplied
    /// by `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    pub seed: u64,
    /// Search-centre shift, as a fraction of the target's `sqrt(w·h)`
    /// (uniform in `±center_jitter`).
    pub center_jitter: f64,
    /// Log-uniform search-scale jitter `exp(±scale_jitter)`.
    pub scale_jitter: f64,
    pub weights: LossWeights,
    /// Where to write the batch dump when the loss turns non-finite.
    pub dump_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 2,
            iterations: 1000,
            decay_at: 0.8,
            decay_factor: 0.1,
            seed: 0,
            center_jitter: 0.25,
            scale_jitter: 0.1,
            weights: LossWeights::default(),
            dump_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if self.adam_eps <= 0.0 {
            return bad("adam epsilon must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} must be at least 2 for batch norm", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.decay_at) || self.decay_factor < 0.0 {
            return bad("decay_at must lie in [0, 1] and decay_factor be non-negative".into());
        }
        if self.center_jitter < 0.0 || self.scale_jitter < 0.0 {
            return bad("jitter amounts must be non-negative".into());
        }
        Ok(())
    }

    /// Set one `train.`-prefixed key; returns `false` for keys it does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("train.") else {
            return Ok(false);
        };
        let f = || -> Result<f64> {
            value
                .parse()
                .map_err(|_| CoreError::Config(format!("{key}: expected a number, got {value:?}")))
        };
        let u = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| CoreError::Config(format!("{key}: expected an integer, got {value:?}")))
        };
        match k {
            "lr" => self.lr = f()?,
            "weight_decay" => self.weight_decay = f()?,
            "beta1" => self.beta1 = f()?,
            "beta2" => self.beta2 = f()?,
            "adam_eps" => self.adam_eps = f()?,
            "batch_size" => self.batch_size = u()?,
            "iterations" => self.iterations = u()?,
            "decay_at" => self.decay_at = f()?,
            "decay_factor" => self.decay_factor = f()?,
            "seed" => self.seed = u()? as u64,
            "center_jitter" => self.center_jitter = f()?,
            "scale_jitter" => self.scale_jitter = f()?,
            "weight_ce" => self.weights.ce = f()?,
            "weight_siou" => self.weights.siou = f()?,
            _ => return Err(CoreError::Config(format!("unknown key {key}"))),
        }
        Ok(true)
    }

    /// Parse the `train.*` keys of a `key = value` file, ignoring others.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.apply(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rate in effect at 0-based `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let boundary = (self.decay_at * self.iterations as f64).floor() as usize;
        if iteration >= boundary {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

/// Frames with one box per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub frames: Vec<Frame>,
    pub boxes: Vec<BoundingBox>,
}

impl TrainSequence {
    pub fn new(frames: Vec<Frame>, boxes: Vec<BoundingBox>) -> Result<Self> {
        if frames.is_empty() || frames.len() != boxes.len() {
            return Err(CoreError::shape(format!(
                "{} frames but {} boxes",
                frames.len(),
                boxes.len()
            )));
        }
        for b in &boxes {
            b.validate()?;
        }
        Ok(Self { frames, boxes })
    }
}

/// One training triple: crops and the search-crop target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub search: Tensor,
    pub static_template: Tensor,
    pub dynamic_template: Tensor,
    pub target: Target,
}

/// Build the sample for frame `t`: the static template comes from frame 0,
/// the dynamic one from `dyn_t`, and the search crop is centred on the
/// frame-`t` box shifted by `(dx, dy)` (fractions of `sqrt(w·h)`) with its
/// side scaled by `scale`.
pub fn make_sample(
    model: &Model,
    seq: &TrainSequence,
    t: usize,
    dyn_t: usize,
    (dx, dy, scale): (f64, f64, f64),
) -> Result<TrainingSample> {
    let cfg = &model.cfg;
    let st = crop_template(&seq.frames[0], &seq.boxes[0], cfg, CropKind::StaticTemplate)?;
    let dt = crop_template(&seq.frames[dyn_t], &seq.boxes[dyn_t], cfg, CropKind::DynamicTemplate)?;
    let gt = seq.boxes[t];
    let base = (gt.w * gt.h).sqrt();
    let (cx, cy) = gt.center();
    let side = gt.context_side(cfg.search_context) * scale;
    let (search, geom) = crop_resize(&seq.frames[t], cx + dx * base, cy + dy * base, side, cfg.search_size)?;
    let target = encode_target(&geom.to_crop(&gt), cfg.search_size, cfg.search_grid())?;
    Ok(TrainingSample {
        search,
        static_template: st.pixels,
        dynamic_template: dt.pixels,
        target,
    })
}

/// Seeded sampler over a fixed set of sequences.
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: ChaCha8Rng,
    center_jitter: f64,
    scale_jitter: f64,
}

impl Sampler {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            center_jitter: cfg.center_jitter,
            scale_jitter: cfg.scale_jitter,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn batch(&mut self, model: &Model, data: &[TrainSequence], size: usize) -> Result<Vec<TrainingSample>> {
        if data.is_empty() {
            return Err(CoreError::shape("no training sequences"));
        }
        (0..size)
            .map(|_| {
                let seq = &data[self.rng.random_range(0..data.len())];
                let t = self.rng.random_range(0..seq.frames.len());
                let dyn_t = self.rng.random_range(0..=t);
                let mut sym = |a: f64| if a > 0.0 { self.rng.random_range(-a..=a) } else { 0.0 };
                let dx = sym(self.center_jitter);
                let dy = sym(self.center_jitter);
                let scale = sym(self.scale_jitter).exp();
                make_sample(model, seq, t, dyn_t, (dx, dy, scale))
            })
            .collect()
    }
}

/// AdamW with bias correction and decoupled weight decay. Parameters the
/// loss does not reach are left untouched.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    step: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            step: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let n = g.len();
            let m = self.m[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![0.0; n]);
            for ((theta, gi), (mi, vi)) in store.get_mut(id).data_mut().iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
                *theta -= lr * (update + cfg.weight_decay * *theta);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub ce: f64,
    pub siou: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
}

impl TrainReport {
    /// `iteration,loss,ce,siou` with full round-trip precision.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iteration,loss,ce,siou\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", r.iteration, r.loss, r.ce, r.siou);
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

fn batch_inputs(samples: &[TrainingSample]) -> Result<ModelInputs> {
    let refs: Vec<_> = samples
        .iter()
        .map(|s| (&s.search, &s.static_template, &s.dynamic_template))
        .collect();
    ModelInputs::stack(&refs)
}

fn tensor_summary(name: &str, t: &Tensor) -> String {
    let d = t.data();
    let finite = d.iter().filter(|v| v.is_finite()).count();
    let (lo, hi) = d
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    format!(
        "{name}: shape {:?}, finite {finite}/{}, min {lo}, max {hi}\n",
        t.shape(),
        d.len()
    )
}

fn nan_dump(iteration: usize, record: &LossRecord, inputs: &ModelInputs, samples: &[TrainingSample], store: &ParamStore) -> String {
    let mut s = format!(
        "non-finite loss at iteration {iteration}: loss {} ce {} siou {}\n",
        record.loss, record.ce, record.siou
    );
    s += &tensor_summary("search", &inputs.search);
    s += &tensor_summary("static_template", &inputs.static_template);
    s += &tensor_summary("dynamic_template", &inputs.dynamic_template);
    for (i, smp) in samples.iter().enumerate() {
        let _ = writeln!(s, "target[{i}]: {:?}", smp.target);
    }
    for (_, e) in store.entries() {
        if e.value.data().iter().any(|v| !v.is_finite()) {
            let _ = writeln!(s, "parameter {} holds non-finite values", e.name);
        }
    }
    s
}

fn update_running_stats(store: &mut ParamStore, f_stats: &[crate::params::BatchStats]) {
    for st in f_stats {
        for (id, batch) in [(st.running_mean, &st.mean), (st.running_var, &st.var)] {
            for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// Optimise `model` in place. `observe` sees every loss record as it is
/// produced. Deterministic for a fixed config: sampling, Gumbel noise and
/// arithmetic are all single-threaded and seeded.
pub fn train(
    model: &mut Model,
    data: &[TrainSequence],
    cfg: &TrainConfig,
    mut observe: impl FnMut(&LossRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut sampler = Sampler::new(cfg);
    let mut opt = AdamW::new(&model.store);
    let mut report = TrainReport::default();
    for it in 0..cfg.iterations {
        let samples = sampler.batch(model, data, cfg.batch_size)?;
        let inputs = batch_inputs(&samples)?;
        let targets: Vec<Target> = samples.iter().map(|s| s.target).collect();
        let noise_seed = sampler.next_u64();
        let (grads, stats, record) = {
            let mut f = Forward::new(&model.store, Mode::Train).with_noise_seed(Some(noise_seed));
            let parts = model.loss_from(&mut f, &inputs, Stage::Embed, None, &targets, cfg.weights)?;
            let record = LossRecord {
                iteration: it,
                loss: f.g.data(parts.total)[0],
                ce: f.g.data(parts.ce)[0],
                siou: f.g.data(parts.siou)[0],
            };
            if !(record.loss.is_finite() && record.ce.is_finite() && record.siou.is_finite()) {
                let dump = nan_dump(it, &record, &inputs, &samples, &model.store);
                let mut msg = format!("loss became non-finite at iteration {it}");
                if let Some(path) = &cfg.dump_path {
                    std::fs::write(path, &dump)?;
                    let _ = write!(msg, "; batch dump written to {}", path.display());
                } else {
                    let _ = write!(msg, "\n{dump}");
                }
                return Err(CoreError::Numerical(msg));
            }
            let grads = f.backward(parts.total)?;
            (grads, std::mem::take(&mut f.batch_stats), record)
        };
        opt.step(&mut model.store, &grads, cfg.lr_at(it), cfg);
        update_running_stats(&mut model.store, &stats);
        observe(&record);
        report.records.push(record);
    }
    Ok(report)
}
