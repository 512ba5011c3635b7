//! Plain slice kernels shared by the forward and backward rules.

/// `c[m,n] += a[m,k] · b[k,n]`, all row-major.
///
/// Uses an AVX2/FMA build of the same loop when the CPU supports it; the
/// choice is made once per process, so results are reproducible on a given
/// machine. Every output entry accumulates its `k` products in order, starting
/// from its current value.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if has_fma() {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { gemm_fma::<true>(m, k, n, a, b, c) };
            return;
        }
    }
    gemm_blocked::<true>(m, k, n, a, b, c, |acc, x, y| acc + x * y);
}

/// `a[m,k] · b[k,n]` into a fresh buffer; same arithmetic as [`gemm_acc`]
/// on a zeroed output, without zeroing the whole output first.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = Vec::with_capacity(m * n);
    let mut tile = vec![0.0; MR.min(m) * n];
    for i in (0..m).step_by(MR) {
        let rows = MR.min(m - i);
        let t = &mut tile[..rows * n];
        let a_rows = &a[i * k..(i + rows) * k];
        #[cfg(target_arch = "x86_64")]
        {
            if has_fma() {
                // SAFETY: the required CPU features were detected at runtime.
                unsafe { gemm_fma::<false>(rows, k, n, a_rows, b, t) };
                out.extend_from_slice(t);
                continue;
            }
        }
        gemm_blocked::<false>(rows, k, n, a_rows, b, t, |acc, x, y| acc + x * y);
        out.extend_from_slice(t);
    }
    out
}

#[cfg(target_arch = "x86_64")]
fn has_fma() -> bool {
    use std::sync::OnceLock;
    static FMA: OnceLock<bool> = OnceLock::new();
    *FMA.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_fma<const ACC: bool>(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_blocked::<ACC>(m, k, n, a, b, c, |acc, x, y| x.mul_add(y, acc));
}

const MR: usize = 4;
const NR: usize = 8;

/// Register-blocked `c += a·b` (or `c = a·b` without `ACC`): each `MR × NR`
/// tile of `c` is held in accumulators across the whole `k` loop.
#[inline(always)]
fn gemm_blocked<const ACC: bool>(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    fma: impl Fn(f64, f64, f64) -> f64 + Copy,
) {
    let full_cols = n / NR * NR;
    let mut i = 0;
    while i < m {
        let rows = MR.min(m - i);
        if rows == MR {
            let ar: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
            for j in (0..full_cols).step_by(NR) {
                let mut acc = [[0.0; NR]; MR];
                if ACC {
                    for (r, acc_r) in acc.iter_mut().enumerate() {
                        acc_r.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
                    }
                }
                for p in 0..k {
                    let bp: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                    for (acc_r, a_r) in acc.iter_mut().zip(&ar) {
                        let x = a_r[p];
                        for (acc_v, &y) in acc_r.iter_mut().zip(bp) {
                            *acc_v = fma(*acc_v, x, y);
                        }
                    }
                }
                for (r, acc_r) in acc.iter().enumerate() {
                    c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(acc_r);
                }
            }
            for j in full_cols..n {
                let mut acc: [f64; MR] = std::array::from_fn(|r| if ACC { c[(i + r) * n + j] } else { 0.0 });
                for p in 0..k {
                    let y = b[p * n + j];
                    for (acc_v, a_r) in acc.iter_mut().zip(&ar) {
                        *acc_v = fma(*acc_v, a_r[p], y);
                    }
                }
                for (r, v) in acc.iter().enumerate() {
                    c[(i + r) * n + j] = *v;
                }
            }
        } else {
            for r in i..m {
                let a_r = &a[r * k..(r + 1) * k];
                let c_r = &mut c[r * n..(r + 1) * n];
                for j in (0..full_cols).step_by(NR) {
                    let mut acc: [f64; NR] = if ACC { c_r[j..j + NR].try_into().unwrap() } else { [0.0; NR] };
                    for (p, &x) in a_r.iter().enumerate() {
                        let bp: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                        for (acc_v, &y) in acc.iter_mut().zip(bp) {
                            *acc_v = fma(*acc_v, x, y);
                        }
                    }
                    c_r[j..j + NR].copy_from_slice(&acc);
                }
                for j in full_cols..n {
                    let mut acc = if ACC { c_r[j] } else { 0.0 };
                    for (p, &x) in a_r.iter().enumerate() {
                        acc = fma(acc, x, b[p * n + j]);
                    }
                    c_r[j] = acc;
                }
            }
        }
        i += rows;
    }
}

/// `exp` applied in place to every element.
///
/// Cody-Waite reduction `x = n·ln2 + r` followed by a degree-13 Taylor
/// polynomial on `|r| <= ln2/2`; within 2 ulp of libm over the finite range,
/// overflowing to `inf` above ~709.78 and flushing to `0` below ~-745.1.
/// The loop is branch-free so it vectorises; the AVX2 build performs the
/// same operations in the same order as the portable one.
pub fn exp_in_place(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if has_fma() {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { exp_avx2(xs) };
            return;
        }
    }
    xs.iter_mut().for_each(|x| *x = exp_one(*x));
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn exp_avx2(xs: &mut [f64]) {
    xs.iter_mut().for_each(|x| *x = exp_one(*x));
}

// max/min rather than clamp keeps the loop branch-free for vectorisation
#[allow(clippy::manual_clamp, clippy::excessive_precision)]
#[inline(always)]
fn exp_one(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    // 1.5·2^52: adding it rounds to an integer held in the low mantissa bits.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let xc = x.max(-745.2).min(709.8);
    let t = xc * LOG2E + SHIFT;
    let n = t - SHIFT;
    let ni = t.to_bits() as i64 - SHIFT.to_bits() as i64;
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    // 2^n split in two factors so both stay normal for n in [-1075, 1024].
    // floor(ni / 2) through a logical shift of a positive bias (AVX2 has no
    // 64-bit arithmetic shift).
    let n1 = (((ni + 2048) as u64) >> 1) as i64 - 1024;
    let n2 = ni - n1;
    let s1 = f64::from_bits(((n1 + 1023) as u64) << 52);
    let s2 = f64::from_bits(((n2 + 1023) as u64) << 52);
    // NaN survives min/max as the non-NaN bound, so restore it explicitly.
    if x.is_nan() {
        x
    } else {
        p * s1 * s2
    }
}

/// Transpose of a row-major `rows × cols` matrix.
pub fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each linear index of `out_shape`, the linear index into a tensor of
/// shape `src` broadcast against it.
pub fn broadcast_map(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - src.len();
    // strides of src aligned to out rank; 0 where broadcast
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Index map from an output position to a broadcast operand position,
/// with fast paths for the layouts that dominate model code.
#[derive(Debug, Clone)]
pub enum BroadcastIndex {
    Same,
    /// Operand equals a trailing block of the output: `i % len`.
    Cycle(usize),
    /// Operand equals the output with a size-1 last axis: `i / width`.
    Repeat(usize),
    General(Vec<usize>),
}

impl BroadcastIndex {
    pub fn new(src: &[usize], out_shape: &[usize]) -> Self {
        if src == out_shape {
            return Self::Same;
        }
        let trimmed: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out_shape.len() && out_shape.ends_with(&trimmed) {
            return Self::Cycle(trimmed.iter().product());
        }
        let r = out_shape.len();
        if src.len() == r && src[r - 1] == 1 && src[..r - 1] == out_shape[..r - 1] {
            return Self::Repeat(out_shape[r - 1]);
        }
        Self::General(broadcast_map(src, out_shape))
    }

    #[inline]
    pub fn get(&self, i: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Cycle(n) => i % n,
            Self::Repeat(w) => i / w,
            Self::General(map) => map[i],
        }
    }
}

/// Split a shape around `axis` into (outer, len, inner) extents.
pub fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Stride-1 patch gathering over an NHWC image batch. Output row
/// `(b, y, x)` holds the `k×k×C` neighbourhood centred at `(y, x)` with zero
/// padding `pad`; output spatial size is `H + 2·pad − k + 1`.
pub fn im2col(
    x: &[f64],
    (batch, h, w, c): (usize, usize, usize, usize),
    k: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let row_len = k * k * c;
    let mut out = vec![0.0; batch * oh * ow * row_len];
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * row_len;
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the image.
pub fn col2im(
    cols: &[f64],
    (batch, h, w, c): (usize, usize, usize, usize),
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let row_len = k * k * c;
    let mut out = vec![0.0; batch * h * w * c];
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * row_len;
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for ch in 0..c {
                            out[dst + ch] += cols[src + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocked_gemm_matches_naive() {
        for (m, k, n) in [(1, 1, 1), (4, 3, 8), (5, 7, 9), (9, 16, 19), (13, 2, 3)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.731).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.419).cos()).collect();
            let mut c: Vec<f64> = (0..m * n).map(|i| i as f64 * 0.01).collect();
            let mut want = c.clone();
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        want[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
            gemm_acc(m, k, n, &a, &b, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "{m}x{k}x{n}");
            }
            let fresh = gemm(m, k, n, &a, &b);
            let mut zeroed = vec![0.0; m * n];
            gemm_acc(m, k, n, &a, &b, &mut zeroed);
            assert_eq!(zeroed, fresh);
        }
    }

    #[test]
    fn exp_matches_libm() {
        let mut xs: Vec<f64> = (0..20_001).map(|i| -740.0 + i as f64 * 0.0724).collect();
        xs.extend([0.0, -0.0, 1e-300, -1e-300, 0.5 * std::f64::consts::LN_2, 709.7, -744.0]);
        let mut ys = xs.clone();
        exp_in_place(&mut ys);
        for (&x, &y) in xs.iter().zip(&ys) {
            let e = x.exp();
            if e >= f64::MIN_POSITIVE {
                assert!(((y - e) / e).abs() < 5e-16, "exp({x}) = {y}, libm {e}");
            } else {
                assert!((y - e).abs() <= 1e-320, "exp({x}) = {y}, libm {e}");
            }
        }
    }

    #[test]
    fn exp_edge_values() {
        let mut xs = [f64::INFINITY, f64::NEG_INFINITY, f64::NAN, 710.0, -800.0];
        exp_in_place(&mut xs);
        assert_eq!(xs[0], f64::INFINITY);
        assert_eq!(xs[1], 0.0);
        assert!(xs[2].is_nan());
        assert_eq!(xs[3], f64::INFINITY);
        assert_eq!(xs[4], 0.0);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[4, 2], &[3]), None);
    }

    #[test]
    fn broadcast_map_repeats_rows() {
        assert_eq!(broadcast_map(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_map(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn gemm_small() {
        let mut c = vec![0.0; 1];
        gemm_acc(1, 2, 1, &[1.0, 2.0], &[3.0, 4.0], &mut c);
        assert_eq!(c, vec![11.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let dims = (2, 3, 4, 2);
        let x: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).sin()).collect();
        let (cols, oh, ow) = im2col(&x, dims, 3, 1);
        assert_eq!((oh, ow), (3, 4));
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, dims, 3, 1);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
