//! Whole-model finite-difference gradient check.
//!
//! Each parameter entry is perturbed in a private copy of the store and the
//! loss is recomputed from the earliest stage that reads it, reusing the
//! cached inputs of that stage.

use nighttrack_autograd::gradcheck::relative_error;

use crate::error::{CoreError, Result};
use crate::head::Target;
use crate::loss::LossWeights;
use crate::model::{Model, ModelInputs, Stage, StageCache};
use crate::params::{Forward, Mode, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub noise_seed: Option<u64>,
    pub weights: LossWeights,
    /// Check at most this many entries per tensor (evenly strided); `None` checks all.
    pub max_per_param: Option<usize>,
    /// Entries above this relative error are counted in `ParamCheck::failed`.
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: nighttrack_autograd::gradcheck::DEFAULT_STEP,
            floor: 1e-4,
            noise_seed: Some(0),
            weights: LossWeights::default(),
            max_per_param: None,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub failed: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest analytic gradient magnitude in the tensor.
    pub max_grad: f64,
}

#[derive(Debug, Clone)]
pub struct ModelGradReport {
    pub params: Vec<ParamCheck>,
    pub loss: f64,
}

impl ModelGradReport {
    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn failed(&self) -> usize {
        self.params.iter().map(|p| p.failed).sum()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn loss_value(
    model: &Model,
    store: &ParamStore,
    inputs: &ModelInputs,
    targets: &[Target],
    opts: &GradCheckOptions,
    stage: Stage,
    cache: &StageCache,
) -> Result<f64> {
    let mut f = Forward::new(store, Mode::Train)
        .with_noise_seed(opts.noise_seed)
        .without_grad();
    let loss = model.loss_from(&mut f, inputs, stage, Some(cache), targets, opts.weights)?;
    Ok(f.g.data(loss.total)[0])
}

/// Compare autodiff and central differences of the train-mode total loss
/// for every trainable parameter accepted by `select`.
pub fn check_model_gradients(
    model: &Model,
    inputs: &ModelInputs,
    targets: &[Target],
    opts: &GradCheckOptions,
    select: impl Fn(&str) -> bool,
) -> Result<ModelGradReport> {
    let mut f = Forward::new(&model.store, Mode::Train).with_noise_seed(opts.noise_seed);
    let out = model.forward(&mut f, inputs)?;
    let loss = model.loss(&mut f, &out, targets, opts.weights)?;
    let loss_val = f.g.data(loss.total)[0];
    if !loss_val.is_finite() {
        return Err(CoreError::Numerical(format!("loss is {loss_val}")));
    }
    let cache = StageCache::capture(&f, &out);
    let grads = f.backward(loss.total)?;

    let mut store = model.store.clone();
    let ids: Vec<ParamId> = model.store.trainable_ids().collect();
    let mut params = Vec::new();
    for id in ids {
        let name = model.store.entry(id).name.clone();
        if !select(&name) {
            continue;
        }
        let n = model.store.get(id).numel();
        let zeros = vec![0.0; n];
        let analytic = grads.get(id).unwrap_or(&zeros);
        let stride = match opts.max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let stage = model.param_stage(id);
        let mut check = ParamCheck {
            name,
            checked: 0,
            failed: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_grad: analytic.iter().fold(0.0, |m, v| m.max(v.abs())),
        };
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = loss_value(model, &store, inputs, targets, opts, stage, &cache)?;
            store.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = loss_value(model, &store, inputs, targets, opts, stage, &cache)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i];
            let rel = relative_error(a, numeric, opts.floor);
            check.max_rel_err = check.max_rel_err.max(rel);
            check.failed += usize::from(!(rel < opts.tolerance));
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.checked += 1;
        }
        params.push(check);
    }
    Ok(ModelGradReport {
        params,
        loss: loss_val,
    })
}
