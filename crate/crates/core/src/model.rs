//! The full network: patch embedding, blender, gated backbone, head and
//! calibrator, with the forward pass split into restartable stages.

use nighttrack_autograd::{Tensor, Var};

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::head::{Head, HeadVars, Target};
use crate::loss::{total_loss, LossParts, LossWeights};
use crate::mhb::{Mhb, SegmentMap};
use crate::ntc::{partition_final, Ntc};
use crate::params::{Forward, Init, ParamId, ParamStore};
use crate::patching::{CropKind, PatchEmbed, Scale};

/// Crop batches `[B, 3, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    pub search: Tensor,
    pub static_template: Tensor,
    pub dynamic_template: Tensor,
}

impl ModelInputs {
    pub fn batch(&self) -> usize {
        self.search.shape()[0]
    }

    /// Stack single crops `[3, S, S]` into batches.
    pub fn stack(samples: &[(&Tensor, &Tensor, &Tensor)]) -> Result<Self> {
        let stack = |pick: &dyn Fn(&(&Tensor, &Tensor, &Tensor)) -> Tensor| -> Result<Tensor> {
            let first = pick(&samples[0]);
            let mut shape = vec![samples.len()];
            shape.extend_from_slice(first.shape());
            let mut data = Vec::with_capacity(first.numel() * samples.len());
            for s in samples {
                let t = pick(s);
                if t.shape() != first.shape() {
                    return Err(CoreError::shape("crops in one batch must share a shape"));
                }
                data.extend_from_slice(t.data());
            }
            Ok(Tensor::new(shape, data)?)
        };
        if samples.is_empty() {
            return Err(CoreError::shape("empty batch"));
        }
        Ok(Self {
            search: stack(&|s| s.0.clone())?,
            static_template: stack(&|s| s.1.clone())?,
            dynamic_template: stack(&|s| s.2.clone())?,
        })
    }
}

/// Restart points of the forward pass, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Embed,
    Mhb,
    Block(usize),
    Head,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub head: HeadVars,
    pub segments: SegmentMap,
    pub final_tokens: Var,
    /// Calibrator offset feature `[B, N_z, d_k]`.
    pub offset: Var,
    /// Calibrator confidence `[B, 1, 1]`.
    pub score: Var,
    /// Inputs of every stage that ran, for [`StageCache`].
    pub boundaries: Vec<(Stage, Vec<Var>)>,
}

/// Stage inputs captured from one forward pass.
#[derive(Debug, Clone)]
pub struct StageCache {
    entries: Vec<(Stage, Vec<Tensor>)>,
}

impl StageCache {
    pub fn capture(f: &Forward<'_>, out: &ModelOutput) -> Self {
        let entries = out
            .boundaries
            .iter()
            .map(|(s, vars)| (*s, vars.iter().map(|v| f.g.value(*v).clone()).collect()))
            .collect();
        Self { entries }
    }

    fn get(&self, stage: Stage) -> Result<&[Tensor]> {
        self.entries
            .iter()
            .find(|(s, _)| *s == stage)
            .map(|(_, t)| t.as_slice())
            .ok_or_else(|| CoreError::shape(format!("stage {stage:?} not in cache")))
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embed: PatchEmbed,
    pub mhb: Mhb,
    pub backbone: Backbone,
    pub head: Head,
    pub ntc: Ntc,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let embed = PatchEmbed::new(&mut init, &cfg)?;
        let mhb = Mhb::new(&mut init, &cfg);
        let backbone = Backbone::new(&mut init, &cfg)?;
        let head = Head::new(&mut init, &cfg);
        let ntc = Ntc::new(&mut init, &cfg);
        Ok(Self {
            cfg,
            store,
            embed,
            mhb,
            backbone,
            head,
            ntc,
        })
    }

    /// Earliest stage whose computation reads parameter `id`.
    pub fn param_stage(&self, id: ParamId) -> Stage {
        let name = &self.store.entry(id).name;
        if name.starts_with("embed.") {
            Stage::Embed
        } else if name.starts_with("mhb.") {
            Stage::Mhb
        } else if let Some(rest) = name.strip_prefix("blocks.") {
            let idx = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
            Stage::Block(idx)
        } else {
            Stage::Head
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, inputs: &ModelInputs) -> Result<ModelOutput> {
        self.forward_from(f, inputs, Stage::Embed, None)
    }

    /// Run the network from `start`, taking that stage's inputs from `cache`
    /// (required unless `start` is [`Stage::Embed`]).
    pub fn forward_from(
        &self,
        f: &mut Forward<'_>,
        inputs: &ModelInputs,
        start: Stage,
        cache: Option<&StageCache>,
    ) -> Result<ModelOutput> {
        let (tokens, segments, boundaries) = self.trunk(f, inputs, start, cache, false)?;
        let parts = partition_final(f, tokens, &segments)?;
        let head = self.head.forward(f, parts.search)?;
        let offset = self.ntc.offset_attention(f, parts.dynamic_template, parts.search)?;
        let score = self.ntc.score(f, offset)?;
        Ok(ModelOutput {
            head,
            segments,
            final_tokens: tokens,
            offset,
            score,
            boundaries,
        })
    }

    /// Training loss computed from `start` along the shortest path: the last
    /// block only produces search-token rows and the calibrator is skipped,
    /// neither of which the loss reads. Equals the loss of a full forward.
    pub fn loss_from(
        &self,
        f: &mut Forward<'_>,
        inputs: &ModelInputs,
        start: Stage,
        cache: Option<&StageCache>,
        targets: &[Target],
        weights: LossWeights,
    ) -> Result<LossParts> {
        let (search, _, _) = self.trunk(f, inputs, start, cache, true)?;
        let head = self.head.forward(f, search)?;
        total_loss(&mut f.g, &head, targets, weights)
    }

    /// Embedding, blender and backbone. With `search_only` the final block
    /// returns just the search-token rows.
    #[allow(clippy::type_complexity)]
    fn trunk(
        &self,
        f: &mut Forward<'_>,
        inputs: &ModelInputs,
        start: Stage,
        cache: Option<&StageCache>,
        search_only: bool,
    ) -> Result<(Var, SegmentMap, Vec<(Stage, Vec<Var>)>)> {
        let mut boundaries = Vec::new();
        let cached = |f: &mut Forward<'_>, stage: Stage| -> Result<Vec<Var>> {
            let cache = cache.ok_or_else(|| CoreError::shape(format!("stage {stage:?} needs a cache")))?;
            Ok(cache.get(stage)?.iter().map(|t| f.constant(t.clone())).collect())
        };

        let embedded = if start == Stage::Embed {
            let mut e = Vec::with_capacity(6);
            for (crops, kind) in [
                (&inputs.search, CropKind::Search),
                (&inputs.static_template, CropKind::StaticTemplate),
                (&inputs.dynamic_template, CropKind::DynamicTemplate),
            ] {
                for scale in [Scale::Initial, Scale::Overlapped] {
                    e.push(self.embed.forward(f, crops, kind, scale)?);
                }
            }
            e
        } else if start == Stage::Mhb {
            cached(f, Stage::Mhb)?
        } else {
            Vec::new()
        };

        let (mut tokens, segments) = if start <= Stage::Mhb {
            boundaries.push((Stage::Mhb, embedded.clone()));
            let [x, xo, zs, zso, zd, zdo] = embedded[..] else {
                return Err(CoreError::shape("expected six embedded sequences"));
            };
            let (z, zo) = self.mhb.template_internal_fusion(f, zs, zd, zso, zdo)?;
            let (r, ro) = self.mhb.cross_modal_alignment(f, x, xo, z, zo)?;
            Mhb::global_integration(f, r, ro, z, zo)?
        } else {
            let first = match start {
                Stage::Block(i) => Stage::Block(i),
                _ => Stage::Head,
            };
            (cached(f, first)?[0], SegmentMap::for_config(&self.cfg))
        };

        let first_block = match start {
            Stage::Block(i) => i,
            Stage::Head => self.backbone.blocks.len(),
            _ => 0,
        };
        let last = self.backbone.blocks.len() - 1;
        for block in &self.backbone.blocks[first_block..] {
            boundaries.push((Stage::Block(block.index), vec![tokens]));
            let rows = (search_only && block.index == last).then(|| segments.search.clone());
            tokens = block.forward_rows(f, tokens, rows)?.tokens;
        }
        if search_only && first_block > last {
            let axis = f.g.shape(tokens).len() - 2;
            tokens = f.g.slice(tokens, axis, segments.search.start, segments.search.len())?;
        } else {
            boundaries.push((Stage::Head, vec![tokens]));
        }
        Ok((tokens, segments, boundaries))
    }

    pub fn loss(&self, f: &mut Forward<'_>, out: &ModelOutput, targets: &[Target], weights: LossWeights) -> Result<LossParts> {
        total_loss(&mut f.g, &out.head, targets, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::head::encode_target;
    use crate::params::Mode;

    fn inputs(cfg: &ModelConfig, b: usize) -> ModelInputs {
        let (s, t) = (cfg.search_size, cfg.template_size);
        ModelInputs {
            search: Tensor::from_fn(&[b, 3, s, s], |i| ((i * 13 % 29) as f64) / 29.0),
            static_template: Tensor::from_fn(&[b, 3, t, t], |i| ((i * 7 % 23) as f64) / 23.0),
            dynamic_template: Tensor::from_fn(&[b, 3, t, t], |i| ((i * 5 % 19) as f64) / 19.0),
        }
    }

    #[test]
    fn staged_forward_matches_full() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg.clone(), 11).unwrap();
        let x = inputs(&cfg, 2);
        let mut f = Forward::new(&model.store, Mode::Train).with_noise_seed(Some(5));
        let out = model.forward(&mut f, &x).unwrap();
        let full = f.g.data(out.head.cls).to_vec();
        let cache = StageCache::capture(&f, &out);
        for stage in [Stage::Mhb, Stage::Block(0), Stage::Block(1), Stage::Head] {
            let mut g = Forward::new(&model.store, Mode::Train).with_noise_seed(Some(5));
            let o = model.forward_from(&mut g, &x, stage, Some(&cache)).unwrap();
            assert_eq!(g.g.data(o.head.cls), full.as_slice(), "{stage:?}");
        }
    }

    #[test]
    fn lean_loss_matches_full_loss() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg.clone(), 3).unwrap();
        let x = inputs(&cfg, 2);
        let targets = [
            encode_target(&BoundingBox::new(20.0, 25.0, 14.0, 18.0), 64, 8).unwrap(),
            encode_target(&BoundingBox::new(30.0, 12.0, 9.0, 11.0), 64, 8).unwrap(),
        ];
        let w = LossWeights::default();
        let mut f = Forward::new(&model.store, Mode::Train).with_noise_seed(Some(2));
        let out = model.forward(&mut f, &x).unwrap();
        let full = model.loss(&mut f, &out, &targets, w).unwrap();
        let full = f.g.data(full.total)[0];
        let cache = StageCache::capture(&f, &out);
        for stage in [Stage::Embed, Stage::Mhb, Stage::Block(0), Stage::Block(1), Stage::Head] {
            let mut g = Forward::new(&model.store, Mode::Train).with_noise_seed(Some(2)).without_grad();
            let lean = model.loss_from(&mut g, &x, stage, Some(&cache), &targets, w).unwrap();
            assert_eq!(g.g.data(lean.total)[0], full, "{stage:?}");
        }
    }

    #[test]
    fn token_count_matches_config() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg.clone(), 1).unwrap();
        let mut f = Forward::new(&model.store, Mode::Eval).without_grad();
        let out = model.forward(&mut f, &inputs(&cfg, 1)).unwrap();
        assert_eq!(f.g.shape(out.final_tokens), &[1, cfg.total_tokens(), cfg.dim]);
        let s = f.g.data(out.score)[0];
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn param_stages_follow_names() {
        let model = Model::new(ModelConfig::tiny(), 1).unwrap();
        let stage = |n: &str| model.param_stage(model.store.id(n).unwrap());
        assert_eq!(stage("embed.role"), Stage::Embed);
        assert_eq!(stage("mhb.align.initial.wq.weight"), Stage::Mhb);
        assert_eq!(stage("blocks.1.mlp.fc1.weight"), Stage::Block(1));
        assert_eq!(stage("head.out.bias"), Stage::Head);
        assert_eq!(stage("ntc.proj.weight"), Stage::Head);
    }
}
