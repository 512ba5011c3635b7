//! Named parameter storage and the per-pass forward context.

use std::collections::HashMap;

use nighttrack_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Running statistics and other buffers are stored but never optimised.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(CoreError::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }
}

/// Seeded parameter initialiser writing into a [`ParamStore`].
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std > 0");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.store.add(name, t, true)
    }

    /// Glorot-uniform weight of shape `[fan_in, fan_out]`.
    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-limit..limit));
        self.store.add(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> ParamId {
        self.store.add(name, Tensor::full(shape, value), trainable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a train-mode batch norm, for running-stat updates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Forward<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
    noise_seed: Option<u64>,
    track_grads: bool,
    /// Forces every activation map to this constant when set.
    pub map_override: Option<f64>,
    pub batch_stats: Vec<BatchStats>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            noise_seed: None,
            track_grads: true,
            map_override: None,
            batch_stats: Vec::new(),
        }
    }

    /// Seed the Gumbel noise used in train mode. Without a seed the noise is
    /// zero, which makes train-mode maps the noise-free softmax.
    pub fn with_noise_seed(mut self, seed: Option<u64>) -> Self {
        self.noise_seed = seed;
        self
    }

    /// Bind parameters as constants; nothing is recorded for backward.
    pub fn without_grad(mut self) -> Self {
        self.track_grads = false;
        self
    }

    pub fn with_map_override(mut self, value: Option<f64>) -> Self {
        self.map_override = value;
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.track_grads && self.store.entry(id).trainable {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    /// Standard Gumbel samples `-ln(-ln u)`, or zeros without a noise seed.
    /// Each `stream` (one per block and head) draws from its own ChaCha
    /// stream, so a partial re-run of the network sees the same noise.
    pub fn gumbel(&self, shape: &[usize], stream: u64) -> Tensor {
        match self.noise_seed {
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                Tensor::from_fn(shape, |_| {
                    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                    -(-u.ln()).ln()
                })
            }
            None => Tensor::zeros(shape),
        }
    }

    /// Run backward from `loss` and gather gradients per parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.g.backward(loss)?;
        Ok(self.gradients())
    }

    pub fn gradients(&self) -> Gradients {
        let grads = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v).map(<[f64]>::to_vec)))
            .collect();
        Gradients { grads }
    }
}

/// Gradients indexed by [`ParamId`]; `None` for parameters the loss did not reach.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
