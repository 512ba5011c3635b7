//! Initial and overlapped patch tokenisation of search and template crops.

use nighttrack_autograd::{Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::nn::Linear;
use crate::params::{Forward, Init, Mode, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CropKind {
    Search,
    StaticTemplate,
    DynamicTemplate,
}

impl CropKind {
    pub fn index(self) -> usize {
        match self {
            Self::Search => 0,
            Self::StaticTemplate => 1,
            Self::DynamicTemplate => 2,
        }
    }

    pub fn is_template(self) -> bool {
        !matches!(self, Self::Search)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Initial,
    /// Same patch side, shifted by half a patch in both axes.
    Overlapped,
}

impl Scale {
    pub fn index(self) -> usize {
        match self {
            Self::Initial => 0,
            Self::Overlapped => 1,
        }
    }
}

/// A square RGB crop `[3, S, S]` tagged with its role.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCrop {
    pub pixels: Tensor,
    pub kind: CropKind,
}

impl ImageCrop {
    pub fn new(pixels: Tensor, kind: CropKind) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
            return Err(CoreError::shape(format!("crop must be [3, S, S], got {s:?}")));
        }
        Ok(Self { pixels, kind })
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub role: CropKind,
    pub scale: Scale,
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Grid side for a crop of `side` pixels.
pub fn grid_side(side: usize, patch: usize, scale: Scale) -> Result<usize> {
    if patch == 0 || !side.is_multiple_of(patch) {
        return Err(CoreError::config(format!(
            "crop side {side} is not divisible by patch {patch}"
        )));
    }
    let g = side / patch;
    match scale {
        Scale::Initial => Ok(g),
        Scale::Overlapped if g >= 2 && patch.is_multiple_of(2) => Ok(g - 1),
        Scale::Overlapped => Err(CoreError::config(format!(
            "overlapped patches need an even patch side and a grid of at least 2, got patch {patch} grid {g}"
        ))),
    }
}

/// Flatten patches of `pixels` (`[3, S, S]`) into rows `[N, 3·p·p]`, ordered
/// row-major over the grid; each row is channel-major then row then column.
pub fn extract_patches(pixels: &Tensor, patch: usize, scale: Scale) -> Result<Tensor> {
    let s = pixels.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
        return Err(CoreError::shape(format!("crop must be [3, S, S], got {s:?}")));
    }
    let side = s[1];
    let g = grid_side(side, patch, scale)?;
    let offset = match scale {
        Scale::Initial => 0,
        Scale::Overlapped => patch / 2,
    };
    let px = pixels.data();
    let row_len = 3 * patch * patch;
    let mut out = Vec::with_capacity(g * g * row_len);
    for gy in 0..g {
        for gx in 0..g {
            let (y0, x0) = (offset + gy * patch, offset + gx * patch);
            for c in 0..3 {
                for dy in 0..patch {
                    let start = (c * side + y0 + dy) * side + x0;
                    out.extend_from_slice(&px[start..start + patch]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![g * g, row_len], out)?)
}

/// Patch projections and the additive position, role and scale embeddings.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: [Linear; 2],
    /// `[search, template] × [initial, overlapped]` positional tables.
    pub pos: [[ParamId; 2]; 2],
    /// `[3, D]`, indexed by [`CropKind::index`].
    pub role: ParamId,
    /// `[2, D]`, indexed by [`Scale::index`].
    pub scale: ParamId,
    pub patch: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let (p, d) = (cfg.patch, cfg.dim);
        let proj = [
            Linear::new(init, "embed.initial", 3 * p * p, d, true),
            Linear::new(init, "embed.overlapped", 3 * p * p, d, true),
        ];
        let mut pos = [[ParamId::default(); 2]; 2];
        for (k, (side, crop)) in [(cfg.search_size, "search"), (cfg.template_size, "template")]
            .into_iter()
            .enumerate()
        {
            for (s, scale) in [Scale::Initial, Scale::Overlapped].into_iter().enumerate() {
                let g = grid_side(side, p, scale)?;
                let tag = if s == 0 { "initial" } else { "overlapped" };
                pos[k][s] = init.normal(&format!("embed.pos.{crop}.{tag}"), &[g * g, d], 0.02);
            }
        }
        Ok(Self {
            proj,
            pos,
            role: init.normal("embed.role", &[3, d], 0.02),
            scale: init.normal("embed.scale", &[2, d], 0.02),
            patch: p,
            dim: d,
        })
    }

    /// Embed a batch of same-kind crops `[B, 3, S, S]` into `[B, N, D]`.
    pub fn forward(&self, f: &mut Forward<'_>, crops: &Tensor, kind: CropKind, scale: Scale) -> Result<Var> {
        let s = crops.shape();
        if s.len() != 4 {
            return Err(CoreError::shape(format!("crop batch must be [B, 3, S, S], got {s:?}")));
        }
        let (b, side) = (s[0], s[2]);
        let per = 3 * side * side;
        let mut rows = Vec::new();
        let mut n = 0;
        for i in 0..b {
            let one = Tensor::new(vec![3, side, side], crops.data()[i * per..(i + 1) * per].to_vec())?;
            let patches = extract_patches(&one, self.patch, scale)?;
            n = patches.shape()[0];
            rows.extend(patches.into_data());
        }
        let x = f.constant(Tensor::new(vec![b, n, 3 * self.patch * self.patch], rows)?);
        let tokens = self.proj[scale.index()].forward(f, x)?;
        let pos_id = self.pos[usize::from(kind.is_template())][scale.index()];
        if f.store().get(pos_id).shape()[0] != n {
            return Err(CoreError::shape(format!(
                "{kind:?} crop of side {side} gives {n} tokens, positional table expects {}",
                f.store().get(pos_id).shape()[0]
            )));
        }
        let pos = f.p(pos_id);
        let role_table = f.p(self.role);
        let role = f.g.slice(role_table, 0, kind.index(), 1)?;
        let scale_table = f.p(self.scale);
        let scale_row = f.g.slice(scale_table, 0, scale.index(), 1)?;
        let tokens = f.g.add(tokens, pos)?;
        let tokens = f.g.add(tokens, role)?;
        Ok(f.g.add(tokens, scale_row)?)
    }

    fn embed(&self, store: &ParamStore, crop: &ImageCrop, scale: Scale) -> Result<TokenSequence> {
        let side = crop.side();
        let g = grid_side(side, self.patch, scale)?;
        let mut f = Forward::new(store, Mode::Eval).without_grad();
        let batch = crop.pixels.clone().reshape(vec![1, 3, side, side])?;
        let v = self.forward(&mut f, &batch, crop.kind, scale)?;
        let tokens = f.g.value(v).clone().reshape(vec![g * g, self.dim])?;
        Ok(TokenSequence {
            tokens,
            role: crop.kind,
            scale,
            grid: (g, g),
        })
    }

    pub fn embed_initial(&self, store: &ParamStore, crop: &ImageCrop) -> Result<TokenSequence> {
        self.embed(store, crop, Scale::Initial)
    }

    pub fn embed_overlapped(&self, store: &ParamStore, crop: &ImageCrop) -> Result<TokenSequence> {
        self.embed(store, crop, Scale::Overlapped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(cfg: &ModelConfig) -> (ParamStore, PatchEmbed) {
        let mut store = ParamStore::new();
        let embed = PatchEmbed::new(&mut Init::new(&mut store, 3), cfg).unwrap();
        (store, embed)
    }

    #[test]
    fn default_grids() {
        let cfg = ModelConfig::desk();
        let (store, embed) = setup(&cfg);
        let search = ImageCrop::new(Tensor::full(&[3, 256, 256], 0.5), CropKind::Search).unwrap();
        let template = ImageCrop::new(Tensor::full(&[3, 128, 128], 0.5), CropKind::StaticTemplate).unwrap();
        let cases = [
            (&search, Scale::Initial, 16),
            (&search, Scale::Overlapped, 15),
            (&template, Scale::Initial, 8),
            (&template, Scale::Overlapped, 7),
        ];
        for (crop, scale, g) in cases {
            let seq = embed.embed(&store, crop, scale).unwrap();
            assert_eq!(seq.grid, (g, g));
            assert_eq!(seq.tokens.shape(), &[g * g, 64]);
        }
    }

    #[test]
    fn overlapped_first_patch_starts_at_half_stride() {
        let side = 256;
        let pixels = Tensor::from_fn(&[3, side, side], |i| (i % (side * side)) as f64);
        let patches = extract_patches(&pixels, 16, Scale::Overlapped).unwrap();
        let row = &patches.data()[..3 * 256];
        // first channel, first patch row: pixel (8, 8..24)
        let expect: Vec<f64> = (8..24).map(|x| (8 * side + x) as f64).collect();
        assert_eq!(&row[..16], expect.as_slice());
        // last row of that patch is image row 23
        assert_eq!(row[15 * 16], (23 * side + 8) as f64);
    }

    #[test]
    fn zero_image_gives_position_plus_role() {
        let cfg = ModelConfig::tiny();
        let (mut store, embed) = setup(&cfg);
        let bias = embed.proj[0].bias.unwrap();
        store.set(bias, Tensor::zeros(&[cfg.dim])).unwrap();
        let crop = ImageCrop::new(Tensor::zeros(&[3, 32, 32]), CropKind::DynamicTemplate).unwrap();
        let seq = embed.embed_initial(&store, &crop).unwrap();
        let pos = store.get(embed.pos[1][0]).data();
        let role = &store.get(embed.role).data()[2 * cfg.dim..3 * cfg.dim];
        let scale = &store.get(embed.scale).data()[..cfg.dim];
        for (i, v) in seq.tokens.data().iter().enumerate() {
            let c = i % cfg.dim;
            assert!((v - (pos[i] + role[c] + scale[c])).abs() < 1e-15);
        }
    }

    #[test]
    fn indivisible_crop_is_config_error() {
        assert!(matches!(grid_side(100, 16, Scale::Initial), Err(CoreError::Config(_))));
    }

    #[test]
    fn patch_coverage_counts() {
        // count how often each pixel of a 64-side crop is covered at patch 8
        let (side, p) = (64, 8);
        let mut initial = vec![0u32; side * side];
        let mut overlapped = vec![0u32; side * side];
        for (scale, counts) in [(Scale::Initial, &mut initial), (Scale::Overlapped, &mut overlapped)] {
            let g = grid_side(side, p, scale).unwrap();
            let off = if scale == Scale::Initial { 0 } else { p / 2 };
            for gy in 0..g {
                for gx in 0..g {
                    for y in off + gy * p..off + (gy + 1) * p {
                        for x in off + gx * p..off + (gx + 1) * p {
                            counts[y * side + x] += 1;
                        }
                    }
                }
            }
        }
        assert!(initial.iter().all(|&c| c == 1));
        assert!(overlapped.iter().all(|&c| c <= 4));
    }
}
