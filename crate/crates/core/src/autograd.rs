//! Reverse-mode automatic differentiation over a recorded graph.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order and `backward` simply walks them in reverse. A graph is
//! built per step (or per sample) and dropped afterwards.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_ex, ReduceMode, Tensor};
use crate::Scalar;

/// Lower clamp on |v| in the signed square-root derivative.
pub const SIGNED_SQRT_EPS: f64 = 1e-8;
/// Norms at or below this are left unnormalized by `l2_normalize`.
pub const L2_EPS: f64 = 1e-12;
/// Signed square-root inputs closer than this to zero count as a kink
/// neighbourhood for gradient checking.
pub const KINK_RADIUS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a node was produced; parents are listed in operand order.
#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    AddRowBias { x: NodeId, bias: NodeId },
    Reduce { x: NodeId, axes: Vec<usize>, mode: ReduceMode, argmax: Vec<usize> },
    Softmax { x: NodeId, axis: usize },
    SoftmaxNll { logits: NodeId, label: usize, probs: Vec<T> },
    SignedSqrt(NodeId),
    L2Normalize { x: NodeId, norm: T },
    Reshape(NodeId),
    Conv2d { x: NodeId, w: NodeId, bias: NodeId, cols: Tensor<T>, ksize: usize },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    ResidualAggregate { x: NodeId, assign: NodeId, mu: NodeId, second_order: bool },
    TvPrior { x: NodeId, beta: T },
}

impl<T> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Reduce { .. } => "reduce",
            Op::Softmax { .. } => "softmax",
            Op::SoftmaxNll { .. } => "softmax_nll",
            Op::SignedSqrt(..) => "signed_sqrt",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::ResidualAggregate { .. } => "residual_aggregate",
            Op::TvPrior { .. } => "tv_prior",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Relu(a) | Op::SignedSqrt(a) | Op::Reshape(a) => vec![a],
            Op::AddRowBias { x, bias } => vec![x, bias],
            Op::Reduce { x, .. }
            | Op::Softmax { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::MaxPool2 { x, .. }
            | Op::TvPrior { x, .. } => vec![x],
            Op::SoftmaxNll { logits, .. } => vec![logits],
            Op::Conv2d { x, w, bias, .. } => vec![x, w, bias],
            Op::ResidualAggregate { x, assign, mu, .. } => vec![x, assign, mu],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    track_pattern: bool,
    pattern: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), track_pattern: false, pattern: FNV_OFFSET }
    }

    /// Graph that fingerprints every branch decision taken by non-smooth ops
    /// (relu sign, max-pool winner, signed-sqrt sign and kink neighbourhood,
    /// zero TV differences). Two evaluations with equal fingerprints lie on
    /// the same smooth piece.
    pub fn with_pattern_tracking() -> Self {
        Graph { track_pattern: true, ..Self::new() }
    }

    pub fn pattern(&self) -> u64 {
        self.pattern
    }

    fn mix(&mut self, word: u64) {
        self.pattern ^= word;
        self.pattern = self.pattern.wrapping_mul(FNV_PRIME);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    /// Gradient of the last `backward` root with respect to `id`. Nodes the
    /// root does not depend on get zeros.
    pub fn grad(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.dims()).expect("node dims are valid"),
        }
    }

    pub fn take_grad(&mut self, id: NodeId) -> Tensor<T> {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.nodes[id.0].value.dims()).expect("node dims are valid"),
        }
    }

    // ── forward ops ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let v = matmul_ex(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).relu();
        if self.track_pattern {
            let words: Vec<u64> = self.value(a).data().chunks(64).map(sign_bits).collect();
            for w in words {
                self.mix(w);
            }
        }
        self.push(v, Op::Relu(a))
    }

    /// Adds `bias` (length C) to every row of the R×C matrix `x`.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).shape2()?;
        if self.value(bias).len() != c {
            return Err(shape_err!("add_row_bias: bias has {} entries, rows have {c}", self.value(bias).len()));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            for (o, &bv) in out[i * c..(i + 1) * c].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let v = Tensor::new(vec![r, c], out)?;
        Ok(self.push(v, Op::AddRowBias { x, bias }))
    }

    pub fn reduce(&mut self, x: NodeId, axes: &[usize], mode: ReduceMode) -> Result<NodeId> {
        let v = self.value(x).reduce(axes, mode, false)?;
        let argmax = if mode == ReduceMode::Max { max_sources(self.value(x), axes)? } else { vec![] };
        if self.track_pattern {
            for &i in &argmax {
                self.mix(i as u64);
            }
        }
        Ok(self.push(v, Op::Reduce { x, axes: axes.to_vec(), mode, argmax }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, &axes, ReduceMode::Sum)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(x).softmax(axis)?;
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    /// Negative log-likelihood of `label` under `softmax(logits)`; logits may
    /// have any dims with K entries in total.
    pub fn softmax_nll(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::Contract(format!("label {label} out of range for {} classes", z.len())));
        }
        let m = z.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
        let exps: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
        let total: T = exps.iter().fold(T::zero(), |acc, &e| acc + e);
        let probs: Vec<T> = exps.iter().map(|&e| e / total).collect();
        let loss = total.ln() + m - z[label];
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxNll { logits, label, probs }))
    }

    pub fn signed_sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.signum() * a.abs().sqrt());
        if self.track_pattern {
            let radius = T::c(KINK_RADIUS);
            let words: Vec<u64> = self
                .value(x)
                .data()
                .chunks(32)
                .map(|chunk| {
                    chunk.iter().enumerate().fold(0u64, |acc, (i, &a)| {
                        let sign = (a > T::zero()) as u64;
                        let near = (a.abs() < radius) as u64;
                        acc | (sign << (2 * i)) | (near << (2 * i + 1))
                    })
                })
                .collect();
            for w in words {
                self.mix(w);
            }
        }
        self.push(v, Op::SignedSqrt(x))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        let norm = self.value(x).norm2();
        let v = if norm > T::c(L2_EPS) { self.value(x).scale(T::one() / norm) } else { self.value(x).clone() };
        if self.track_pattern {
            self.mix((norm > T::c(L2_EPS)) as u64);
        }
        self.push(v, Op::L2Normalize { x, norm })
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(dims)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Same-padded stride-1 convolution of an H×W×Cin map with a
    /// k×k×Cin×Cout kernel plus per-channel bias.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let (h, wd, cin) = hwc(self.value(x))?;
        let wdims = self.value(w).dims().to_vec();
        let [kh, kw, wcin, cout] = wdims[..] else {
            return Err(shape_err!("conv2d: kernel must be k×k×Cin×Cout, got {wdims:?}"));
        };
        if kh != kw || kh % 2 == 0 || wcin != cin {
            return Err(shape_err!("conv2d: kernel {wdims:?} incompatible with input channels {cin}"));
        }
        if self.value(bias).len() != cout {
            return Err(shape_err!("conv2d: bias length {} != {cout}", self.value(bias).len()));
        }
        let cols = im2col(self.value(x).data(), h, wd, cin, kh);
        let wmat = self.value(w).reshape(&[kh * kw * cin, cout])?;
        let mut y = matmul_ex(&cols, &wmat, false, false)?;
        let b = self.value(bias).data().to_vec();
        for row in y.data_mut().chunks_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let y = y.into_reshaped(&[h, wd, cout])?;
        Ok(self.push(y, Op::Conv2d { x, w, bias, cols, ksize: kh }))
    }

    /// 2×2 stride-2 max pooling over an H×W×C map; a trailing odd row or
    /// column is dropped.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = hwc(self.value(x))?;
        if h < 2 || w < 2 {
            return Err(shape_err!("max_pool2: input {h}×{w} smaller than the 2×2 window"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(oh * ow * c);
        let mut argmax = Vec::with_capacity(oh * ow * c);
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = (2 * i * w + 2 * j) * c + ch;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let k = ((2 * i + di) * w + 2 * j + dj) * c + ch;
                        if src[k] > src[best] {
                            best = k;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        if self.track_pattern {
            let words: Vec<u64> = argmax.iter().map(|&i| i as u64).collect();
            for wd in words {
                self.mix(wd);
            }
        }
        let v = Tensor::new(vec![oh, ow, c], out)?;
        Ok(self.push(v, Op::MaxPool2 { x, argmax }))
    }

    /// Assignment-weighted residual pooling.
    ///
    /// With `x` L×d, `assign` L×k and `mu` k×d, row k of the result is
    /// `Σ_l a_lk (x_l − μ_k)`; with `second_order` the row is extended by
    /// `Σ_l a_lk (x_l − μ_k)⊙(x_l − μ_k)`, giving k×2d.
    pub fn residual_aggregate(&mut self, x: NodeId, assign: NodeId, mu: NodeId, second_order: bool) -> Result<NodeId> {
        let (l, d) = self.value(x).shape2()?;
        let (la, k) = self.value(assign).shape2()?;
        let (km, dm) = self.value(mu).shape2()?;
        if la != l || km != k || dm != d {
            return Err(shape_err!("residual_aggregate: x {l}×{d}, assignments {la}×{k}, centers {km}×{dm}"));
        }
        let width = if second_order { 2 * d } else { d };
        let xs = self.value(x).data();
        let a = self.value(assign).data();
        let m = self.value(mu).data();
        let mut out = vec![T::zero(); k * width];
        for li in 0..l {
            let xrow = &xs[li * d..(li + 1) * d];
            for ki in 0..k {
                let w = a[li * k + ki];
                let mrow = &m[ki * d..(ki + 1) * d];
                let orow = &mut out[ki * width..(ki + 1) * width];
                for j in 0..d {
                    let r = xrow[j] - mrow[j];
                    orow[j] += w * r;
                    if second_order {
                        orow[d + j] += w * r * r;
                    }
                }
            }
        }
        let v = Tensor::new(vec![k, width], out)?;
        Ok(self.push(v, Op::ResidualAggregate { x, assign, mu, second_order }))
    }

    /// Total-variation prior of an H×W×C image, summed over channels.
    pub fn tv_prior(&mut self, x: NodeId, beta: T) -> Result<NodeId> {
        let (h, w, c) = hwc(self.value(x))?;
        let img = self.value(x).data();
        let half = beta / T::c(2.0);
        let mut total = T::zero();
        let mut zero_bits = Vec::new();
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let (dh, dv) = tv_diffs(img, h, w, c, i, j, ch);
                    let s = dh * dh + dv * dv;
                    if s > T::zero() {
                        total += s.powf(half);
                    }
                    if self.track_pattern {
                        zero_bits.push(s == T::zero());
                    }
                }
            }
        }
        for chunk in zero_bits.chunks(64) {
            let w = chunk.iter().enumerate().fold(0u64, |acc, (i, &z)| acc | ((z as u64) << i));
            self.mix(w);
        }
        Ok(self.push(Tensor::scalar(total), Op::TvPrior { x, beta }))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Accumulate d(root)/d(node) into every node the root depends on.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got dims {:?}",
                self.value(root).dims()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[root.0] = Some(Tensor::ones(self.value(root).dims())?);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            let contributions = self.local_grads(id, &g)?;
            self.grads[id] = Some(g);
            for (p, pg) in contributions {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut self.grads[p.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_grads(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                let mut out = Vec::with_capacity(2);
                if self.needs(a) {
                    out.push((a, if ta { matmul_ex(bv, g, tb, true)? } else { matmul_ex(g, bv, false, !tb)? }));
                }
                if self.needs(b) {
                    out.push((b, if tb { matmul_ex(g, av, true, ta)? } else { matmul_ex(av, g, !ta, false)? }));
                }
                out
            }
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::Sub(a, b) => vec![(a, g.clone()), (b, g.scale(-T::one()))],
            &Op::Mul(a, b) => {
                vec![(a, g.mul(self.value(b))?), (b, g.mul(self.value(a))?)]
            }
            &Op::Scale(a, s) => vec![(a, g.scale(s))],
            &Op::Relu(a) => {
                let d = g.zip_map(self.value(a), "relu", |gv, x| if x > T::zero() { gv } else { T::zero() })?;
                vec![(a, d)]
            }
            &Op::AddRowBias { x, bias } => {
                let db = g.reduce(&[0], ReduceMode::Sum, false)?.into_reshaped(self.value(bias).dims())?;
                vec![(x, g.clone()), (bias, db)]
            }
            Op::Reduce { x, axes, mode, argmax } => {
                let xv = self.value(*x);
                let d = match mode {
                    ReduceMode::Max => {
                        let mut d = vec![T::zero(); xv.len()];
                        for (&src, &gv) in argmax.iter().zip(g.data()) {
                            d[src] += gv;
                        }
                        Tensor::new(xv.dims().to_vec(), d)?
                    }
                    _ => {
                        let scale = if *mode == ReduceMode::Mean {
                            T::one() / T::c((xv.len() / g.len()) as f64)
                        } else {
                            T::one()
                        };
                        broadcast_back(g, xv.dims(), axes, scale)
                    }
                };
                vec![(*x, d)]
            }
            &Op::Softmax { x, axis } => {
                let (outer, n, inner) = y.split_axis(axis)?;
                let yd = y.data();
                let gd = g.data();
                let mut d = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let mut dot = T::zero();
                        for k in 0..n {
                            dot += gd[at(k)] * yd[at(k)];
                        }
                        for k in 0..n {
                            d[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                vec![(x, Tensor::new(y.dims().to_vec(), d)?)]
            }
            Op::SoftmaxNll { logits, label, probs } => {
                let gv = g.data()[0];
                let d: Vec<T> =
                    probs.iter().enumerate().map(|(i, &p)| gv * if i == *label { p - T::one() } else { p }).collect();
                vec![(*logits, Tensor::new(self.value(*logits).dims().to_vec(), d)?)]
            }
            &Op::SignedSqrt(x) => {
                let eps = T::c(SIGNED_SQRT_EPS);
                let half = T::c(0.5);
                let d = g.zip_map(self.value(x), "signed_sqrt", |gv, v| gv * half / v.abs().max(eps).sqrt())?;
                vec![(x, d)]
            }
            &Op::L2Normalize { x, norm } => {
                if norm > T::c(L2_EPS) {
                    let proj = y.dot(g)?;
                    let inv = T::one() / norm;
                    let d = g.zip_map(y, "l2_normalize", |gv, yv| (gv - yv * proj) * inv)?;
                    vec![(x, d)]
                } else {
                    vec![(x, g.clone())]
                }
            }
            &Op::Reshape(x) => vec![(x, g.reshape(self.value(x).dims())?)],
            Op::Conv2d { x, w, bias, cols, ksize } => {
                let (h, wd, cin) = hwc(self.value(*x))?;
                let cout = self.value(*bias).len();
                let gmat = g.reshape(&[h * wd, cout])?;
                let wmat = self.value(*w).reshape(&[ksize * ksize * cin, cout])?;
                let mut out = Vec::with_capacity(3);
                if self.needs(*x) {
                    let dcols = matmul_ex(&gmat, &wmat, false, true)?;
                    out.push((*x, Tensor::new(vec![h, wd, cin], col2im(dcols.data(), h, wd, cin, *ksize))?));
                }
                if self.needs(*w) {
                    out.push((*w, matmul_ex(cols, &gmat, true, false)?.into_reshaped(self.value(*w).dims())?));
                }
                if self.needs(*bias) {
                    out.push((*bias, gmat.reduce(&[0], ReduceMode::Sum, false)?));
                }
                out
            }
            Op::MaxPool2 { x, argmax } => {
                let xv = self.value(*x);
                let mut d = vec![T::zero(); xv.len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                vec![(*x, Tensor::new(xv.dims().to_vec(), d)?)]
            }
            &Op::ResidualAggregate { x, assign, mu, second_order } => {
                let (l, d) = self.value(x).shape2()?;
                let (_, k) = self.value(assign).shape2()?;
                let width = if second_order { 2 * d } else { d };
                let xs = self.value(x).data();
                let a = self.value(assign).data();
                let m = self.value(mu).data();
                let gd = g.data();
                let mut dx = vec![T::zero(); l * d];
                let mut da = vec![T::zero(); l * k];
                let mut dm = vec![T::zero(); k * d];
                let two = T::c(2.0);
                for li in 0..l {
                    for ki in 0..k {
                        let w = a[li * k + ki];
                        let grow = &gd[ki * width..(ki + 1) * width];
                        let mut acc_a = T::zero();
                        for j in 0..d {
                            let r = xs[li * d + j] - m[ki * d + j];
                            let g1 = grow[j];
                            let mut dr = w * g1;
                            acc_a += g1 * r;
                            if second_order {
                                let g2 = grow[d + j];
                                acc_a += g2 * r * r;
                                dr += w * g2 * two * r;
                            }
                            dx[li * d + j] += dr;
                            dm[ki * d + j] -= dr;
                        }
                        da[li * k + ki] = acc_a;
                    }
                }
                vec![
                    (x, Tensor::new(vec![l, d], dx)?),
                    (assign, Tensor::new(vec![l, k], da)?),
                    (mu, Tensor::new(vec![k, d], dm)?),
                ]
            }
            &Op::TvPrior { x, beta } => {
                let (h, w, c) = hwc(self.value(x))?;
                let img = self.value(x).data();
                let gv = g.data()[0];
                let half = beta / T::c(2.0);
                let two = T::c(2.0);
                let mut d = vec![T::zero(); img.len()];
                for i in 0..h {
                    for j in 0..w {
                        for ch in 0..c {
                            let (dh, dv) = tv_diffs(img, h, w, c, i, j, ch);
                            let s = dh * dh + dv * dv;
                            // d s^(β/2)/ds; the zero-difference kink takes the zero subgradient
                            let ds = if s > T::zero() { half * s.powf(half - T::one()) } else { T::zero() };
                            let coef = gv * ds * two;
                            let here = (i * w + j) * c + ch;
                            if j + 1 < w {
                                d[here + c] += coef * dh;
                                d[here] -= coef * dh;
                            }
                            if i + 1 < h {
                                d[here + w * c] += coef * dv;
                                d[here] -= coef * dv;
                            }
                        }
                    }
                }
                vec![(x, Tensor::new(vec![h, w, c], d)?)]
            }
        };
        Ok(out)
    }
}

fn sign_bits<T: Scalar>(chunk: &[T]) -> u64 {
    chunk.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | (((v > T::zero()) as u64) << i))
}

pub(crate) fn hwc<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.dims()[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(shape_err!("expected an H×W×C map, got dims {:?}", t.dims())),
    }
}

/// Forward differences at (i, j); zero past the last row/column.
fn tv_diffs<T: Scalar>(img: &[T], h: usize, w: usize, c: usize, i: usize, j: usize, ch: usize) -> (T, T) {
    let here = img[(i * w + j) * c + ch];
    let dh = if j + 1 < w { img[(i * w + j + 1) * c + ch] - here } else { T::zero() };
    let dv = if i + 1 < h { img[((i + 1) * w + j) * c + ch] - here } else { T::zero() };
    (dh, dv)
}

/// Flat source index of the first maximum for every output of a max-reduce.
fn max_sources<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Vec<usize>> {
    let dims = x.dims();
    let rank = dims.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        reduced[a] = true;
    }
    let kept: Vec<usize> = dims.iter().zip(&reduced).map(|(&d, &r)| if r { 1 } else { d }).collect();
    let out_len: usize = kept.iter().product();
    let mut best: Vec<Option<usize>> = vec![None; out_len];
    let mut index = vec![0usize; rank];
    let data = x.data();
    for (flat, &v) in data.iter().enumerate() {
        let o = index.iter().zip(&kept).zip(&reduced).fold(0, |acc, ((&i, &d), &r)| acc * d + if r { 0 } else { i });
        match best[o] {
            Some(b) if data[b] >= v => {}
            _ => best[o] = Some(flat),
        }
        for ax in (0..rank).rev() {
            index[ax] += 1;
            if index[ax] < dims[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    Ok(best.into_iter().map(|b| b.expect("every output has a source")).collect())
}

/// Spread a reduced gradient back over the reduced axes.
fn broadcast_back<T: Scalar>(g: &Tensor<T>, dims: &[usize], axes: &[usize], scale: T) -> Tensor<T> {
    let rank = dims.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        reduced[a] = true;
    }
    let kept: Vec<usize> = dims.iter().zip(&reduced).map(|(&d, &r)| if r { 1 } else { d }).collect();
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut index = vec![0usize; rank];
    let gd = g.data();
    for _ in 0..n {
        let o = index.iter().zip(&kept).zip(&reduced).fold(0, |acc, ((&i, &d), &r)| acc * d + if r { 0 } else { i });
        out.push(gd[o] * scale);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            if index[ax] < dims[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    Tensor::new(dims.to_vec(), out).expect("dims come from a live tensor")
}

/// Patch matrix for a same-padded k×k convolution: one row per output
/// location, columns ordered (ky, kx, cin).
fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, cin: usize, k: usize) -> Tensor<T> {
    let pad = (k / 2) as isize;
    let width = k * k * cin;
    let mut cols = vec![T::zero(); h * w * width];
    for i in 0..h {
        for j in 0..w {
            let row = &mut cols[(i * w + j) * width..(i * w + j + 1) * width];
            for ky in 0..k {
                let si = i as isize + ky as isize - pad;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sj = j as isize + kx as isize - pad;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = (si as usize * w + sj as usize) * cin;
                    let dst = (ky * k + kx) * cin;
                    row[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    Tensor::new(vec![h * w, width], cols).expect("positive extents")
}

fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, cin: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let width = k * k * cin;
    let mut x = vec![T::zero(); h * w * cin];
    for i in 0..h {
        for j in 0..w {
            let row = &cols[(i * w + j) * width..(i * w + j + 1) * width];
            for ky in 0..k {
                let si = i as isize + ky as isize - pad;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sj = j as isize + kx as isize - pad;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let dst = (si as usize * w + sj as usize) * cin;
                    let src = (ky * k + kx) * cin;
                    for c in 0..cin {
                        x[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    x
}
