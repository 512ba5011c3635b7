//! Independent loop and matrix oracles. Nothing here goes through the
//! autograd graph; weights are read straight out of the parameter store.

#![allow(dead_code)]

use nalgebra::DMatrix;
use nighttrack_autograd::Tensor;
use nighttrack_core::aktg::activation_from_logits;
use nighttrack_core::backbone::Block;
use nighttrack_core::config::CorrectionAxis;
use nighttrack_core::model::{ModelInputs, Stage};
use nighttrack_core::nn::{split_heads, LayerNorm, Linear, Mlp};
use nighttrack_core::ntc::Ntc;
use nighttrack_core::params::{Forward, Mode, ParamStore};
use nighttrack_core::synth::{generate, SceneSpec};
use nighttrack_core::tracker::{crop_search, Tracker};
use nighttrack_core::{BoundingBox, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn mat(t: &Tensor) -> DMatrix<f64> {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected a matrix, got {s:?}");
    DMatrix::from_row_slice(s[0], s[1], t.data())
}

pub fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)]);
        }
    }
    Tensor::new(vec![m.nrows(), m.ncols()], data).unwrap()
}

pub fn linear(store: &ParamStore, l: &Linear, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = x * mat(store.get(l.weight));
    if let Some(b) = l.bias {
        let b = store.get(b).data();
        for mut row in y.row_iter_mut() {
            for (v, bi) in row.iter_mut().zip(b) {
                *v += bi;
            }
        }
    }
    y
}

pub fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &DMatrix<f64>) -> DMatrix<f64> {
    let (gamma, beta) = (store.get(ln.gamma).data(), store.get(ln.beta).data());
    let mut y = x.clone();
    for r in 0..x.nrows() {
        let n = x.ncols() as f64;
        let mean = x.row(r).sum() / n;
        let var = x.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for c in 0..x.ncols() {
            y[(r, c)] = (x[(r, c)] - mean) / (var + ln.eps).sqrt() * gamma[c] + beta[c];
        }
    }
    y
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

pub fn mlp(store: &ParamStore, m: &Mlp, x: &DMatrix<f64>) -> DMatrix<f64> {
    let h = linear(store, &m.fc1, x).map(gelu);
    linear(store, &m.fc2, &h)
}

/// Row-wise softmax with the max subtracted.
pub fn softmax_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = x.clone();
    for r in 0..x.nrows() {
        let m = x.row(r).max();
        let z: f64 = x.row(r).iter().map(|v| (v - m).exp()).sum();
        for c in 0..x.ncols() {
            y[(r, c)] = (x[(r, c)] - m).exp() / z;
        }
    }
    y
}

pub fn attention(q: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
    softmax_rows(&((q * k.transpose()) / (q.ncols() as f64).sqrt()))
}

/// Pre-norm transformer block in which every head's attended value is
/// multiplied by `value_scale`: 1 is a plain transformer block.
pub fn vanilla_block(store: &ParamStore, b: &Block, x: &DMatrix<f64>, value_scale: f64) -> DMatrix<f64> {
    let h = layer_norm(store, &b.norm1, x);
    let (q, k, v) = (linear(store, &b.wq, &h), linear(store, &b.wk, &h), linear(store, &b.wv, &h));
    let dh = q.ncols() / b.heads;
    let mut merged = DMatrix::zeros(x.nrows(), q.ncols());
    for i in 0..b.heads {
        let cols = i * dh..(i + 1) * dh;
        let qi = q.columns(cols.start, dh).into_owned();
        let ki = k.columns(cols.start, dh).into_owned();
        let vi = v.columns(cols.start, dh).into_owned();
        let out = attention(&qi, &ki) * vi * value_scale;
        merged.columns_mut(cols.start, dh).copy_from(&out);
    }
    let x = x + linear(store, &b.proj, &merged);
    let h = layer_norm(store, &b.norm2, &x);
    &x + mlp(store, &b.mlp, &h)
}

/// `(A·diag(M) + A)·V` (column) or `(diag(M)·A + A)·V` (row) by explicit loops.
pub fn naive_correction(a: &[f64], m: &[f64], v: &[f64], n: usize, d: usize, axis: CorrectionAxis) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            let mut s = 0.0;
            for j in 0..n {
                let w = match axis {
                    CorrectionAxis::Column => a[i * n + j] * m[j] + a[i * n + j],
                    CorrectionAxis::Row => m[i] * a[i * n + j] + a[i * n + j],
                };
                s += w * v[j * d + c];
            }
            out[i * d + c] = s;
        }
    }
    out
}

/// Offset attention by explicit loops: project, attend, subtract in query
/// space, project again, instance-normalise each channel over tokens, ReLU.
pub fn naive_offset_attention(store: &ParamStore, ntc: &Ntc, zd: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let q = linear(store, &ntc.proj, zd);
    let kv = linear(store, &ntc.proj, x);
    let dk = q.ncols();
    let mut off = DMatrix::zeros(q.nrows(), dk);
    for i in 0..q.nrows() {
        let logits: Vec<f64> = (0..kv.nrows())
            .map(|j| (0..dk).map(|c| q[(i, c)] * kv[(j, c)]).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for c in 0..dk {
            let attended: f64 = (0..kv.nrows()).map(|j| (logits[j] - mx).exp() / z * kv[(j, c)]).sum();
            off[(i, c)] = q[(i, c)] - attended;
        }
    }
    let y = linear(store, &ntc.offset, &off);
    let mut out = y.clone();
    let n = y.nrows() as f64;
    for c in 0..y.ncols() {
        let mean = y.column(c).sum() / n;
        let var = y.column(c).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for r in 0..y.nrows() {
            out[(r, c)] = ((y[(r, c)] - mean) / (var + ntc.eps).sqrt()).max(0.0);
        }
    }
    out
}

/// Scalar SIoU loss written from the definition: 1 − IoU plus half of the
/// distance cost (with the angle factor) and the shape cost.
pub fn siou_reference(p: &BoundingBox, t: &BoundingBox) -> f64 {
    let ix = (p.right().min(t.right()) - p.x.max(t.x)).max(0.0);
    let iy = (p.bottom().min(t.bottom()) - p.y.max(t.y)).max(0.0);
    let inter = ix * iy;
    let iou = inter / (p.w * p.h + t.w * t.h - inter);
    let cw = p.right().max(t.right()) - p.x.min(t.x);
    let ch = p.bottom().max(t.bottom()) - p.y.min(t.y);
    let (pc, tc) = (p.center(), t.center());
    let (dx, dy) = (tc.0 - pc.0, tc.1 - pc.1);
    let sigma = (dx * dx + dy * dy).sqrt();
    // Λ = sin(2α) with sin α = |dy|/σ
    let lambda = if sigma == 0.0 { 0.0 } else { (2.0 * (dy.abs() / sigma).asin()).sin() };
    let gamma = 2.0 - lambda;
    let delta = (1.0 - (-gamma * (dx / cw).powi(2)).exp()) + (1.0 - (-gamma * (dy / ch).powi(2)).exp());
    let shape = |a: f64, b: f64| (1.0 - (-(a - b).abs() / a.max(b)).exp()).powi(4);
    let omega = shape(p.w, t.w) + shape(p.h, t.h);
    1.0 - iou + (delta + omega) / 2.0
}

pub fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn tokens(cfg: &ModelConfig, seed: u64) -> DMatrix<f64> {
    normal_mat(&mut ChaCha8Rng::seed_from_u64(seed), cfg.total_tokens(), cfg.dim)
}

pub fn run_blocks(model: &Model, x: &DMatrix<f64>, map: f64) -> Vec<f64> {
    let mut f = Forward::new(&model.store, Mode::Train)
        .with_noise_seed(Some(3))
        .with_map_override(Some(map));
    let v = f.constant(to_tensor(x));
    let out = model.backbone.forward(&mut f, v).unwrap();
    f.g.data(out).to_vec()
}

/// Gate logits of block 0, head 0 for the initial tiny model on a synthetic
/// scene, one `[keep, drop]` row per token.
pub fn initial_gate_logits() -> (Model, Tensor) {
    let model = Model::new(ModelConfig::tiny(), 21).unwrap();
    let scene = generate(&SceneSpec::default()).unwrap();
    let t = Tracker::new(&model, Default::default());
    let state = t.init(&scene.frames[0], scene.boxes[0]).unwrap();
    let (search, _) = crop_search(&scene.frames[1], &scene.boxes[0], &model.cfg).unwrap();
    let inputs = ModelInputs::stack(&[(
        &search,
        &state.static_template.pixels,
        &state.dynamic_template.pixels,
    )])
    .unwrap();
    let mut f = Forward::new(&model.store, Mode::Eval);
    let out = model.forward(&mut f, &inputs).unwrap();
    let x = out
        .boundaries
        .iter()
        .find(|(s, _)| *s == Stage::Block(0))
        .map(|(_, v)| v[0])
        .unwrap();
    let gate = model.backbone.blocks[0].aktg.clone().unwrap();
    let heads = split_heads(&mut f.g, x, model.cfg.heads).unwrap();
    let (l, gl) = gate.dual_path(&mut f, heads[0]).unwrap();
    let (fused, _) = gate.gated_fusion(&mut f, l, gl).unwrap();
    let lg = gate.map_logits(&mut f, fused).unwrap();
    let logits = f.g.value(lg).clone();
    (model, logits)
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `E[σ(δ + L)]` for standard logistic `L` (the difference of two Gumbel
/// variables), by Simpson's rule over `[-40, 40]`.
pub fn soft_keep_expectation(gap: f64) -> f64 {
    let (n, lo, hi) = (40_000usize, -40.0, 40.0);
    let h = (hi - lo) / n as f64;
    let f = |l: f64| sigmoid(gap + l) * sigmoid(l) * (1.0 - sigmoid(l));
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Per-token `(mean, standard error)` of the keep value over `draws` seeds.
pub fn keep_moments(model: &Model, logits: &Tensor, hard: bool, draws: u64) -> Vec<(f64, f64)> {
    let n = logits.numel() / 2;
    let (mut sum, mut sq) = (vec![0.0; n], vec![0.0; n]);
    for seed in 0..draws {
        let mut f = Forward::new(&model.store, Mode::Train).with_noise_seed(Some(seed));
        let lv = f.constant(logits.clone());
        let m = activation_from_logits(&mut f, lv, 1.0, hard, 0).unwrap();
        for (i, v) in f.g.data(m).iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let k = draws as f64;
    (0..n)
        .map(|i| {
            let mean = sum[i] / k;
            (mean, ((sq[i] / k - mean * mean) / k).sqrt())
        })
        .collect()
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox::new(
        rng.random_range(-50.0..200.0),
        rng.random_range(-50.0..200.0),
        rng.random_range(1.0..80.0),
        rng.random_range(1.0..80.0),
    )
}
