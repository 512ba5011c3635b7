use crate::error::{Result, TensorError};
use crate::kernels::{self, axis_extents, broadcast_shape, BroadcastIndex};
use crate::tensor::{numel, validate_shape, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Powi(i32),
    Gelu,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    SumAxis(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    InstanceNorm { x: Var, eps: f64 },
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Im2col { x: Var, k: usize, pad: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run computation tape.
///
/// Nodes are appended in execution order, so the arena is always
/// topologically sorted and backward is a single reverse sweep. A node
/// requires grad iff any of its inputs does; constant subgraphs are skipped
/// during backward.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        t.zero_grad();
        self.push(t, Op::Leaf)
    }

    /// Leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        t.zero_grad();
        self.push(t, Op::Leaf)
    }

    /// Copy of `v`'s value as a new constant leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs
            .iter()
            .any(|v| self.nodes[v.0].value.requires_grad());
        let mut t = Tensor::new(shape, data).expect("op produced consistent shape");
        t.set_requires_grad(needs);
        self.push(t, op)
    }

    // ---------------------------------------------------------------------
    // elementwise
    // ---------------------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let av = self.data(a);
        let bv = self.data(b);
        let ma = BroadcastIndex::new(&sa, &out_shape);
        let mb = BroadcastIndex::new(&sb, &out_shape);
        let total = numel(&out_shape);
        let data = match kind {
            BinaryKind::Add => broadcast_apply(av, &ma, bv, &mb, total, |x, y| x + y),
            BinaryKind::Sub => broadcast_apply(av, &ma, bv, &mb, total, |x, y| x - y),
            BinaryKind::Mul => broadcast_apply(av, &ma, bv, &mb, total, |x, y| x * y),
            BinaryKind::Div => broadcast_apply(av, &ma, bv, &mb, total, |x, y| x / y),
            BinaryKind::Max => broadcast_apply(av, &ma, bv, &mb, total, f64::max),
            BinaryKind::Min => broadcast_apply(av, &ma, bv, &mb, total, f64::min),
        };
        Ok(self.record(out_shape, data, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b, "maximum")
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Min, a, b, "minimum")
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let xv = self.data(x);
        let map = |f: &dyn Fn(f64) -> f64| -> Vec<f64> { xv.iter().map(|&v| f(v)).collect() };
        let data = match kind {
            UnaryKind::Neg => xv.iter().map(|v| -v).collect(),
            UnaryKind::Scale(c) => xv.iter().map(|v| c * v).collect(),
            UnaryKind::AddScalar(c) => xv.iter().map(|v| v + c).collect(),
            UnaryKind::Relu => xv.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            UnaryKind::Sigmoid => sigmoid_slice(xv),
            UnaryKind::Exp => {
                let mut out = xv.to_vec();
                kernels::exp_in_place(&mut out);
                out
            }
            UnaryKind::Ln => map(&f64::ln),
            UnaryKind::Sqrt => map(&f64::sqrt),
            UnaryKind::Abs => map(&f64::abs),
            UnaryKind::Powi(n) => map(&|v: f64| v.powi(n)),
            UnaryKind::Gelu => gelu_gate(xv).iter().zip(xv).map(|(s, v)| v * s).collect(),
            UnaryKind::Tanh => map(&f64::tanh),
        };
        let shape = self.shape(x).to_vec();
        self.record(shape, data, Op::Unary(kind, x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    /// `max(x, 0)` with subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn powi(&mut self, x: Var, n: i32) -> Var {
        self.unary(UnaryKind::Powi(n), x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    // ---------------------------------------------------------------------
    // linear algebra
    // ---------------------------------------------------------------------

    /// `[.., m, k] × [.., k, n]`. `b` may be rank 2, in which case it is
    /// shared across every batch entry of `a`; otherwise batch dims must be
    /// identical.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let av = self.data(a);
        let bv = self.data(b);
        let out = if sb.len() == 2 {
            kernels::gemm(av.len() / k, k, n, av, bv)
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(mismatch());
            }
            let batch = av.len() / (m * k);
            let mut out = Vec::with_capacity(batch * m * n);
            for i in 0..batch {
                out.extend(kernels::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                ));
            }
            out
        };
        Ok(self.record(out_shape, out, Op::MatMul(a, b), &[a, b]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::Axis { axis: 1, rank: s.len() });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let data = transpose_batched(self.data(x), r, c);
        let mut out_shape = s.clone();
        let len = out_shape.len();
        out_shape.swap(len - 2, len - 1);
        Ok(self.record(out_shape, data, Op::Transpose(x), &[x]))
    }

    // ---------------------------------------------------------------------
    // reductions and normalisation
    // ---------------------------------------------------------------------

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::Axis { axis, rank });
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`; non-finite input is an error.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        if !self.value(x).is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let shape = self.shape(x).to_vec();
        let data = softmax_along(self.data(x), &shape, axis, false);
        Ok(self.record(shape, data, Op::Softmax(x, axis), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        if !self.value(x).is_finite() {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        let shape = self.shape(x).to_vec();
        let data = softmax_along(self.data(x), &shape, axis, true);
        Ok(self.record(shape, data, Op::LogSoftmax(x, axis), &[x]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().sum();
        Ok(self.record(vec![1], vec![s], Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_extents(&shape, axis);
        let xv = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.record(out_shape, out, Op::SumAxis(x, axis), &[x]))
    }

    /// Average pooling along `axis` (kept as length 1).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let len = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len))
    }

    /// Per-row normalisation over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("rank >= 1");
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.data(x);
        let gv = self.data(gamma);
        let bv = self.data(beta);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(c) {
            let (mean, inv) = moments(row.iter().copied(), c, eps);
            out.extend(
                row.iter()
                    .zip(gv.iter().zip(bv))
                    .map(|(&v, (&g, &b))| (v - mean) * inv * g + b),
            );
        }
        Ok(self.record(
            shape,
            out,
            Op::LayerNorm { x, gamma, beta, eps },
            &[x, gamma, beta],
        ))
    }

    /// Normalise `[.., N, C]` over the token axis `N` separately for every
    /// leading index and channel (zero mean, unit variance; no affine).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Axis { axis: 1, rank: shape.len() });
        }
        let (n, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let xv = self.data(x);
        let mut out = vec![0.0; xv.len()];
        for (block, oblock) in xv.chunks_exact(n * c).zip(out.chunks_exact_mut(n * c)) {
            for ch in 0..c {
                let (mean, inv) = moments((0..n).map(|t| block[t * c + ch]), n, eps);
                for t in 0..n {
                    oblock[t * c + ch] = (block[t * c + ch] - mean) * inv;
                }
            }
        }
        Ok(self.record(shape, out, Op::InstanceNorm { x, eps }, &[x]))
    }

    // ---------------------------------------------------------------------
    // structural
    // ---------------------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        self.check_axis(*first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_extents(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.data(p);
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(self.record(out_shape, out, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let xv = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.record(out_shape, out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Slices of the given lengths along `axis`; lengths must sum to the axis size.
    pub fn split(&mut self, x: Var, axis: usize, lens: &[usize]) -> Result<Vec<Var>> {
        self.check_axis(x, axis)?;
        let total: usize = lens.iter().sum();
        if total != self.shape(x)[axis] {
            return Err(TensorError::Invalid(format!(
                "split lengths {lens:?} do not cover axis of size {}",
                self.shape(x)[axis]
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(lens.len());
        for &l in lens {
            out.push(self.slice(x, axis, start, l)?);
            start += l;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        validate_shape(shape)?;
        if numel(shape) != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.record(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Stride-1 `k×k` neighbourhood gathering on an NHWC batch `[B,H,W,C]`,
    /// producing `[B·H'·W', k·k·C]` rows (zero padding `pad`).
    pub fn im2col(&mut self, x: Var, k: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] + 2 * pad < k || s[2] + 2 * pad < k {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: format!("im2col expects [B,H,W,C] covering a {k}x{k} kernel"),
            });
        }
        let (cols, oh, ow) = kernels::im2col(self.data(x), (s[0], s[1], s[2], s[3]), k, pad);
        Ok(self.record(
            vec![s[0] * oh * ow, k * k * s[3]],
            cols,
            Op::Im2col { x, k, pad },
            &[x],
        ))
    }

    // ---------------------------------------------------------------------
    // backward
    // ---------------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// reachable `param` leaf; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            self.backward_node(node, g, &mut adj, &mut leaf_grads, i);
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn backward_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        adj: &mut [Option<Vec<f64>>],
        leaf_grads: &mut Vec<(usize, Vec<f64>)>,
        index: usize,
    ) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => leaf_grads.push((index, g)),
            &Op::Binary(kind, a, b) => {
                let av = self.data(a);
                let bv = self.data(b);
                let out_shape = node.value.shape();
                let sa = self.shape(a);
                let sb = self.shape(b);
                let ma = BroadcastIndex::new(sa, out_shape);
                let mb = BroadcastIndex::new(sb, out_shape);
                let ia = |i: usize| ma.get(i);
                let ib = |i: usize| mb.get(i);
                let partials = |i: usize| -> (f64, f64) {
                    let (x, z) = (av[ia(i)], bv[ib(i)]);
                    match kind {
                        BinaryKind::Add => (1.0, 1.0),
                        BinaryKind::Sub => (1.0, -1.0),
                        BinaryKind::Mul => (z, x),
                        BinaryKind::Div => (1.0 / z, -x / (z * z)),
                        BinaryKind::Max => {
                            if x >= z {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                        BinaryKind::Min => {
                            if x <= z {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                    }
                };
                let need_a = self.needs(a);
                let need_b = self.needs(b);
                let mut ga = need_a.then(|| vec![0.0; av.len()]);
                let mut gb = need_b.then(|| vec![0.0; bv.len()]);
                for (i, &gi) in g.iter().enumerate() {
                    let (pa, pb) = partials(i);
                    if let Some(ga) = &mut ga {
                        ga[ia(i)] += gi * pa;
                    }
                    if let Some(gb) = &mut gb {
                        gb[ib(i)] += gi * pb;
                    }
                }
                if let Some(ga) = ga {
                    accumulate(adj, a, ga);
                }
                if let Some(gb) = gb {
                    accumulate(adj, b, gb);
                }
            }
            &Op::Unary(UnaryKind::Gelu, x) => {
                let xv = self.data(x);
                let gx = gelu_gate(xv)
                    .iter()
                    .zip(xv)
                    .zip(g)
                    .map(|((&s, &v), gi)| {
                        gi * (s + 2.0 * v * s * (1.0 - s) * GELU_K * (1.0 + 3.0 * GELU_C * v * v))
                    })
                    .collect();
                accumulate(adj, x, gx);
            }
            &Op::Unary(kind, x) => {
                let xv = self.data(x);
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv.iter().zip(y))
                    .map(|(&gi, (&v, &out))| {
                        gi * match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Scale(c) => c,
                            UnaryKind::AddScalar(_) => 1.0,
                            UnaryKind::Relu => {
                                if v > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => out * (1.0 - out),
                            UnaryKind::Exp => out,
                            UnaryKind::Ln => 1.0 / v,
                            UnaryKind::Sqrt => 0.5 / out,
                            UnaryKind::Abs => {
                                if v > 0.0 {
                                    1.0
                                } else if v < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Powi(n) => f64::from(n) * v.powi(n - 1),
                            UnaryKind::Gelu => unreachable!("handled above"),
                            UnaryKind::Tanh => 1.0 - out * out,
                        }
                    })
                    .collect();
                accumulate(adj, x, gx);
            }
            &Op::MatMul(a, b) => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let av = self.data(a);
                let bv = self.data(b);
                if sb.len() == 2 {
                    let rows = av.len() / k;
                    if self.needs(a) {
                        let bt = kernels::transpose(k, n, bv);
                        let mut ga = vec![0.0; av.len()];
                        kernels::gemm_acc(rows, n, k, &g, &bt, &mut ga);
                        accumulate(adj, a, ga);
                    }
                    if self.needs(b) {
                        let at = kernels::transpose(rows, k, av);
                        let mut gb = vec![0.0; bv.len()];
                        kernels::gemm_acc(k, rows, n, &at, &g, &mut gb);
                        accumulate(adj, b, gb);
                    }
                } else {
                    let batch = av.len() / (m * k);
                    let mut ga = self.needs(a).then(|| vec![0.0; av.len()]);
                    let mut gb = self.needs(b).then(|| vec![0.0; bv.len()]);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        if let Some(ga) = &mut ga {
                            let bt = kernels::transpose(k, n, bi);
                            kernels::gemm_acc(m, n, k, gi, &bt, &mut ga[i * m * k..(i + 1) * m * k]);
                        }
                        if let Some(gb) = &mut gb {
                            let at = kernels::transpose(m, k, ai);
                            kernels::gemm_acc(k, m, n, &at, gi, &mut gb[i * k * n..(i + 1) * k * n]);
                        }
                    }
                    if let Some(ga) = ga {
                        accumulate(adj, a, ga);
                    }
                    if let Some(gb) = gb {
                        accumulate(adj, b, gb);
                    }
                }
            }
            &Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                accumulate(adj, x, transpose_batched(&g, r, c));
            }
            &Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_extents(node.value.shape(), axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                accumulate(adj, x, gx);
            }
            &Op::LogSoftmax(x, axis) => {
                let (outer, len, inner) = axis_extents(node.value.shape(), axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let total: f64 = (0..len).map(|l| g[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = g[at(l)] - y[at(l)].exp() * total;
                        }
                    }
                }
                accumulate(adj, x, gx);
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                accumulate(adj, x, vec![g[0]; n]);
            }
            &Op::SumAxis(x, axis) => {
                let (outer, len, inner) = axis_extents(self.shape(x), axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        gx[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                    }
                }
                accumulate(adj, x, gx);
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.data(x);
                let gv = self.data(gamma);
                let c = gv.len();
                let mut gx = vec![0.0; xv.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut gxhat = vec![0.0; c];
                for (r, row) in xv.chunks_exact(c).enumerate() {
                    let (mean, inv) = moments(row.iter().copied(), c, eps);
                    let grow = &g[r * c..(r + 1) * c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * inv;
                        gxhat[j] = grow[j] * gv[j];
                        ggamma[j] += grow[j] * xhat[j];
                        gbeta[j] += grow[j];
                    }
                    let s1: f64 = gxhat.iter().sum();
                    let s2: f64 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let cf = c as f64;
                    for j in 0..c {
                        gx[r * c + j] = inv / cf * (cf * gxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                if self.needs(x) {
                    accumulate(adj, x, gx);
                }
                if self.needs(gamma) {
                    accumulate(adj, gamma, ggamma);
                }
                if self.needs(beta) {
                    accumulate(adj, beta, gbeta);
                }
            }
            &Op::InstanceNorm { x, eps } => {
                let s = node.value.shape();
                let (n, c) = (s[s.len() - 2], s[s.len() - 1]);
                let xv = self.data(x);
                let mut gx = vec![0.0; xv.len()];
                let nf = n as f64;
                for (b, block) in xv.chunks_exact(n * c).enumerate() {
                    let base = b * n * c;
                    for ch in 0..c {
                        let (_, inv) = moments((0..n).map(|t| block[t * c + ch]), n, eps);
                        let at = |t: usize| base + t * c + ch;
                        let s1: f64 = (0..n).map(|t| g[at(t)]).sum();
                        let s2: f64 = (0..n).map(|t| g[at(t)] * y[at(t)]).sum();
                        for t in 0..n {
                            gx[at(t)] = inv / nf * (nf * g[at(t)] - s1 - y[at(t)] * s2);
                        }
                    }
                }
                accumulate(adj, x, gx);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(adj, p, gp);
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_extents(self.shape(x), axis);
                let len = node.value.shape()[axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(adj, x, gx);
            }
            &Op::Reshape(x) => accumulate(adj, x, g),
            &Op::Im2col { x, k, pad } => {
                let s = self.shape(x);
                accumulate(adj, x, kernels::col2im(&g, (s[0], s[1], s[2], s[3]), k, pad));
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Logistic function over a slice, via `exp(-|x|)` so no term overflows.
fn sigmoid_slice(xs: &[f64]) -> Vec<f64> {
    let mut e: Vec<f64> = xs.iter().map(|v| -v.abs()).collect();
    kernels::exp_in_place(&mut e);
    e.iter()
        .zip(xs)
        .map(|(&e, &v)| if v >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) })
        .collect()
}

/// `σ(2u)` with `u = K(v + C v³)`, which equals `(1 + tanh u) / 2`.
fn gelu_gate(xs: &[f64]) -> Vec<f64> {
    let u: Vec<f64> = xs.iter().map(|&v| 2.0 * GELU_K * (v + GELU_C * v * v * v)).collect();
    sigmoid_slice(&u)
}

/// (mean, 1/sqrt(biased var + eps)) of `n` values.
fn moments(values: impl Iterator<Item = f64> + Clone, n: usize, eps: f64) -> (f64, f64) {
    let nf = n as f64;
    let mean = values.clone().sum::<f64>() / nf;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Elementwise `f(a, b)` over the broadcast output, with loops specialised
/// for the common layouts.
fn broadcast_apply(
    av: &[f64],
    ma: &BroadcastIndex,
    bv: &[f64],
    mb: &BroadcastIndex,
    total: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(total);
    match (ma, mb) {
        (BroadcastIndex::Same, BroadcastIndex::Same) => {
            out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        }
        (BroadcastIndex::Same, BroadcastIndex::Cycle(n)) => {
            for chunk in av.chunks_exact(*n) {
                out.extend(chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)));
            }
        }
        (BroadcastIndex::Cycle(n), BroadcastIndex::Same) => {
            for chunk in bv.chunks_exact(*n) {
                out.extend(av.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        (BroadcastIndex::Same, BroadcastIndex::Repeat(w)) => {
            for (chunk, &y) in av.chunks_exact(*w).zip(bv) {
                out.extend(chunk.iter().map(|&x| f(x, y)));
            }
        }
        (BroadcastIndex::Repeat(w), BroadcastIndex::Same) => {
            for (&x, chunk) in av.iter().zip(bv.chunks_exact(*w)) {
                out.extend(chunk.iter().map(|&y| f(x, y)));
            }
        }
        _ => out.extend((0..total).map(|i| f(av[ma.get(i)], bv[mb.get(i)]))),
    }
    out
}

fn transpose_batched(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for block in x.chunks_exact(r * c) {
        out.extend(kernels::transpose(r, c, block));
    }
    out
}

fn softmax_along(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_extents(shape, axis);
    if inner == 1 && !log {
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(len) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|v| v - max));
            let e = &mut out[start..];
            kernels::exp_in_place(e);
            let inv = 1.0 / e.iter().sum::<f64>();
            e.iter_mut().for_each(|v| *v *= inv);
        }
        return out;
    }
    let mut out = vec![0.0; x.len()];
    let mut row = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            for (l, r) in row.iter_mut().enumerate() {
                *r = x[at(l)] - max;
            }
            let shifted = if log { row.clone() } else { Vec::new() };
            kernels::exp_in_place(&mut row);
            let z: f64 = row.iter().sum();
            if log {
                let lz = z.ln();
                for (l, s) in shifted.iter().enumerate() {
                    out[at(l)] = s - lz;
                }
            } else {
                let inv = 1.0 / z;
                for (l, e) in row.iter().enumerate() {
                    out[at(l)] = e * inv;
                }
            }
        }
    }
    out
}
