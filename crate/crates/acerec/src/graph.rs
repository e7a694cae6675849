//! Reverse-mode autodiff over dense 2-D tensors.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly, records its
//! inputs, and `backward` replays the tape in reverse to accumulate
//! gradients. The op set is exactly what the model needs; all matrices are
//! row-major `Array2<S>`.

use ndarray::{Array2, Axis};
use std::sync::Arc;

use crate::scalar::Scalar;

/// Additive guard used when normalizing possibly-zero vectors.
pub const NORM_EPS: f64 = 1e-12;
/// Variance guard inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive mask value that survives `x + MASK == MASK` in f32 and f64.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    AddScaled(NodeId, NodeId, S),
    Scale(NodeId, S),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    GatherRows(NodeId, Arc<[usize]>),
    TileRows(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    MeanRows(NodeId),
    GroupMeanRows(NodeId, usize),
    Reshape(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm(NodeId, NodeId, NodeId),
    L2NormalizeRows(NodeId),
    NllPickSum(NodeId, Arc<[usize]>),
    SumAll(NodeId),
}

struct Node<S: Scalar> {
    value: Arc<Array2<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradient buffers produced by [`Graph::backward`], indexed by node.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Array2<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<S>> {
        self.grads[id.0].take()
    }
}

#[derive(Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Array2<S> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Insert a trainable leaf. Shared storage: the caller keeps the Arc.
    pub fn leaf(&mut self, value: Arc<Array2<S>>, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a non-trainable constant.
    pub fn constant(&mut self, value: Array2<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.dim(), vb.dim(), "add: shape mismatch");
        let out = va + vb;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Broadcast-add a 1×d row vector to every row of an n×d matrix.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(vb.nrows(), 1, "add_row: rhs must be a row vector");
        assert_eq!(va.ncols(), vb.ncols(), "add_row: width mismatch");
        let out = va + &vb.row(0);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddRow(a, b), rg)
    }

    /// `a + c * b`
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: S) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.dim(), vb.dim(), "add_scaled: shape mismatch");
        let out = va + &vb.mapv(|x| x * c);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddScaled(a, b, c), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let out = self.value(a).mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNT(a, b), rg)
    }

    /// Select rows of `a` by index; indices may repeat.
    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<[usize]>) -> NodeId {
        let va = self.value(a);
        let mut out = Array2::zeros((idx.len(), va.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < va.nrows(), "gather_rows: index out of range");
            out.row_mut(i).assign(&va.row(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, idx), rg)
    }

    /// Stack `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        let va = self.value(a);
        let (n, d) = va.dim();
        let mut out = Array2::zeros((n * times, d));
        for t in 0..times {
            out.slice_mut(ndarray::s![t * n..(t + 1) * n, ..]).assign(va);
        }
        let rg = self.rg(a);
        self.push(out, Op::TileRows(a, times), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut out = Array2::zeros((total, d));
        let mut r = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.ncols(), d, "concat_rows: width mismatch");
            out.slice_mut(ndarray::s![r..r + v.nrows(), ..]).assign(v);
            r += v.nrows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.nrows(), "slice_rows: out of range");
        let out = va.slice(ndarray::s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start, len), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut out = Array2::zeros((n, total));
        let mut c = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), n, "concat_cols: height mismatch");
            out.slice_mut(ndarray::s![.., c..c + v.ncols()]).assign(v);
            c += v.ncols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.ncols(), "slice_cols: out of range");
        let out = va.slice(ndarray::s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start, len), rg)
    }

    /// Mean over rows: n×d → 1×d.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let n = va.nrows();
        assert!(n > 0);
        let mean = va.mean_axis(Axis(0)).unwrap();
        let out = mean.insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Mean over consecutive groups of `group` rows: (g·group)×d → g×d.
    pub fn group_mean_rows(&mut self, a: NodeId, group: usize) -> NodeId {
        let va = self.value(a);
        let (n, d) = va.dim();
        assert!(group > 0 && n % group == 0, "group_mean_rows: bad group");
        let g = n / group;
        let mut out = Array2::zeros((g, d));
        let inv = S::c(1.0 / group as f64);
        for i in 0..g {
            let block = va.slice(ndarray::s![i * group..(i + 1) * group, ..]);
            let sum = block.sum_axis(Axis(0));
            out.row_mut(i).assign(&sum.mapv(|x| x * inv));
        }
        let rg = self.rg(a);
        self.push(out, Op::GroupMeanRows(a, group), rg)
    }

    /// Row-major reshape; element count must be preserved.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols, "reshape: element count mismatch");
        let flat: Vec<S> = va.iter().cloned().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Per-row layer normalization with learned gain/bias (each 1×d).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        assert_eq!(vg.nrows(), 1);
        assert_eq!(vb.nrows(), 1);
        assert_eq!(vx.ncols(), vg.ncols());
        let (n, d) = vx.dim();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let row = vx.row(i);
            let (mu, sigma) = row_moments(&row);
            for j in 0..d {
                out[[i, j]] = (row[j] - mu) / sigma * vg[[0, j]] + vb[[0, j]];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm(x, gamma, beta), rg)
    }

    /// Normalize each row to unit L2 norm (with the zero-vector guard).
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let out = l2_normalize_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::L2NormalizeRows(a), rg)
    }

    /// Negative log-likelihood: −Σᵢ logp[i, targets[i]], as a 1×1 scalar.
    pub fn nll_pick_sum(&mut self, logp: NodeId, targets: Arc<[usize]>) -> NodeId {
        let v = self.value(logp);
        assert_eq!(v.nrows(), targets.len(), "nll: target count mismatch");
        let mut s = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < v.ncols(), "nll: target out of range");
            s = s - v[[i, t]];
        }
        let out = Array2::from_elem((1, 1), s);
        let rg = self.rg(logp);
        self.push(out, Op::NllPickSum(logp, targets), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let out = Array2::from_elem((1, 1), s);
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    /// Reverse pass from the given seed gradients (usually one 1×1 seed of 1).
    pub fn backward(&self, seeds: Vec<(NodeId, Array2<S>)>) -> Gradients<S> {
        let mut grads: Vec<Option<Array2<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            assert_eq!(seed.dim(), self.value(id).dim(), "backward: seed shape");
            acc_owned(&mut grads[id.0], seed);
        }
        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            // take() frees intermediate buffers as the walk proceeds
            let g = grads[i].take().unwrap();
            self.backprop_node(i, g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: Array2<S>, grads: &mut [Option<Array2<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*b) {
                    acc_view(&mut grads[b.0], &g);
                }
                if self.rg(*a) {
                    acc_owned(&mut grads[a.0], g);
                }
            }
            Op::AddRow(a, b) => {
                if self.rg(*b) {
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc_owned(&mut grads[b.0], col_sum);
                }
                if self.rg(*a) {
                    acc_owned(&mut grads[a.0], g);
                }
            }
            Op::AddScaled(a, b, c) => {
                if self.rg(*b) {
                    acc_owned(&mut grads[b.0], g.mapv(|x| x * *c));
                }
                if self.rg(*a) {
                    acc_owned(&mut grads[a.0], g);
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    acc_owned(&mut grads[a.0], g.mapv(|x| x * *c));
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let da = g.dot(&self.value(*b).t());
                    acc_owned(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let db = self.value(*a).t().dot(&g);
                    acc_owned(&mut grads[b.0], db);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    let da = g.dot(self.value(*b));
                    acc_owned(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let db = g.t().dot(self.value(*a));
                    acc_owned(&mut grads[b.0], db);
                }
            }
            Op::GatherRows(a, idx) => {
                if self.rg(*a) {
                    let va = self.value(*a);
                    let mut da = Array2::zeros(va.dim());
                    for (i, &r) in idx.iter().enumerate() {
                        let mut dst = da.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc_owned(&mut grads[a.0], da);
                }
            }
            Op::TileRows(a, times) => {
                if self.rg(*a) {
                    let (n, d) = self.value(*a).dim();
                    let mut da = Array2::zeros((n, d));
                    for t in 0..*times {
                        da += &g.slice(ndarray::s![t * n..(t + 1) * n, ..]);
                    }
                    acc_owned(&mut grads[a.0], da);
                }
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if self.rg(p) {
                        let slice = g.slice(ndarray::s![r..r + n, ..]).to_owned();
                        acc_owned(&mut grads[p.0], slice);
                    }
                    r += n;
                }
            }
            Op::SliceRows(a, start, len) => {
                if self.rg(*a) {
                    let va = self.value(*a);
                    let mut da = Array2::zeros(va.dim());
                    da.slice_mut(ndarray::s![*start..*start + *len, ..]).assign(&g);
                    acc_owned(&mut grads[a.0], da);
                }
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.rg(p) {
                        let slice = g.slice(ndarray::s![.., c..c + w]).to_owned();
                        acc_owned(&mut grads[p.0], slice);
                    }
                    c += w;
                }
            }
            Op::SliceCols(a, start, len) => {
                if self.rg(*a) {
                    let va = self.value(*a);
                    let mut da = Array2::zeros(va.dim());
                    da.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&g);
                    acc_owned(&mut grads[a.0], da);
                }
            }
            Op::MeanRows(a) => {
                if self.rg(*a) {
                    let va = self.value(*a);
                    let n = va.nrows();
                    let inv = S::c(1.0 / n as f64);
                    let mut da = Array2::zeros(va.dim());
                    let grow = g.row(0);
                    for mut row in da.rows_mut() {
                        row.assign(&grow.mapv(|x| x * inv));
                    }
                    acc_owned(&mut grads[a.0], da);
                }
            }
            Op::GroupMeanRows(a, group) => {
                if self.rg(*a) {
                    let va = self.value(*a);
                    let inv = S::c(1.0 / *group as f64);
                    let mut da = Array2::zeros(va.dim());
                    for i in 0..g.nrows() {
                        let grow = g.row(i).mapv(|x| x * inv);
                        for r in i * group..(i + 1) * group {
                            da.row_mut(r).assign(&grow);
                        }
                    }
                    acc_owned(&mut grads[a.0], da);
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    let dim = self.value(*a).dim();
                    let flat: Vec<S> = g.iter().cloned().collect();
                    acc_owned(&mut grads[a.0], Array2::from_shape_vec(dim, flat).unwrap());
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let mut da = self.value(*a).mapv(gelu_grad);
                    da *= &g;
                    acc_owned(&mut grads[a.0], da);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.rg(*a) {
                    let y = node.value.as_ref();
                    let mut da = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let yi = y.row(i);
                        let gi = g.row(i);
                        let dot: S = yi.iter().zip(gi.iter()).map(|(&a, &b)| a * b).sum();
                        for j in 0..y.ncols() {
                            da[[i, j]] = yi[j] * (gi[j] - dot);
                        }
                    }
                    acc_owned(&mut grads[a.0], da);
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.rg(*a) {
                    let y = node.value.as_ref();
                    let mut da = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let gsum: S = g.row(i).iter().cloned().sum();
                        for j in 0..y.ncols() {
                            da[[i, j]] = g[[i, j]] - y[[i, j]].exp() * gsum;
                        }
                    }
                    acc_owned(&mut grads[a.0], da);
                }
            }
            Op::LayerNorm(x, gamma, beta) => {
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let (n, d) = vx.dim();
                let inv_d = S::c(1.0 / d as f64);
                let mut dx = Array2::zeros((n, d));
                let mut dgamma = Array2::zeros((1, d));
                let mut dbeta = Array2::zeros((1, d));
                for i in 0..n {
                    let row = vx.row(i);
                    let (mu, sigma) = row_moments(&row);
                    let inv_sigma = S::one() / sigma;
                    // x̂ and gy = g∘γ for this row
                    let mut mean_gy = S::zero();
                    let mut mean_gy_xhat = S::zero();
                    let mut xhat = vec![S::zero(); d];
                    let mut gy = vec![S::zero(); d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mu) * inv_sigma;
                        gy[j] = g[[i, j]] * vg[[0, j]];
                        mean_gy += gy[j];
                        mean_gy_xhat += gy[j] * xhat[j];
                    }
                    mean_gy *= inv_d;
                    mean_gy_xhat *= inv_d;
                    for j in 0..d {
                        dx[[i, j]] = (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) * inv_sigma;
                        dgamma[[0, j]] += g[[i, j]] * xhat[j];
                        dbeta[[0, j]] += g[[i, j]];
                    }
                }
                if self.rg(*x) {
                    acc_owned(&mut grads[x.0], dx);
                }
                if self.rg(*gamma) {
                    acc_owned(&mut grads[gamma.0], dgamma);
                }
                if self.rg(*beta) {
                    acc_owned(&mut grads[beta.0], dbeta);
                }
            }
            Op::L2NormalizeRows(a) => {
                if self.rg(*a) {
                    let va = self.value(*a);
                    let eps = S::c(NORM_EPS);
                    let (n, d) = va.dim();
                    let mut da = Array2::zeros((n, d));
                    for i in 0..n {
                        let row = va.row(i);
                        let r = row.iter().map(|&x| x * x).sum::<S>().sqrt();
                        let denom = r + eps;
                        let dot: S = row.iter().zip(g.row(i).iter()).map(|(&x, &gg)| x * gg).sum();
                        let corr = if r > S::zero() {
                            dot / (r * denom * denom)
                        } else {
                            S::zero()
                        };
                        for j in 0..d {
                            da[[i, j]] = g[[i, j]] / denom - row[j] * corr;
                        }
                    }
                    acc_owned(&mut grads[a.0], da);
                }
            }
            Op::NllPickSum(logp, targets) => {
                if self.rg(*logp) {
                    let scalar = g[[0, 0]];
                    let mut da = Array2::zeros(self.value(*logp).dim());
                    for (i, &t) in targets.iter().enumerate() {
                        da[[i, t]] -= scalar;
                    }
                    acc_owned(&mut grads[logp.0], da);
                }
            }
            Op::SumAll(a) => {
                if self.rg(*a) {
                    let scalar = g[[0, 0]];
                    acc_owned(&mut grads[a.0], Array2::from_elem(self.value(*a).dim(), scalar));
                }
            }
        }
    }
}

fn acc_owned<S: Scalar>(slot: &mut Option<Array2<S>>, delta: Array2<S>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

fn acc_view<S: Scalar>(slot: &mut Option<Array2<S>>, delta: &Array2<S>) {
    match slot {
        Some(acc) => *acc += delta,
        None => *slot = Some(delta.clone()),
    }
}

fn row_moments<S: Scalar>(row: &ndarray::ArrayView1<S>) -> (S, S) {
    let d = row.len();
    let inv_d = S::c(1.0 / d as f64);
    let mu = row.iter().cloned().sum::<S>() * inv_d;
    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<S>() * inv_d;
    let sigma = (var + S::c(LAYER_NORM_EPS)).sqrt();
    (mu, sigma)
}

/// tanh-form GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::c(0.797_884_560_802_865_4);
    let a = S::c(0.044715);
    let half = S::c(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::c(0.797_884_560_802_865_4);
    let a = S::c(0.044715);
    let half = S::c(0.5);
    let three = S::c(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

/// Numerically stable row-wise softmax (plain helper, shared with inference).
pub fn softmax_rows<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    let mut out = Array2::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[[i, j]] = e;
            sum += e;
        }
        let inv = S::one() / sum;
        for j in 0..x.ncols() {
            out[[i, j]] *= inv;
        }
    }
    out
}

/// Numerically stable row-wise log-softmax (plain helper, shared with inference).
pub fn log_softmax_rows<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    let mut out = Array2::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v - lse;
        }
    }
    out
}

/// Row-wise L2 normalization with the zero guard (plain helper).
pub fn l2_normalize_rows<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    let eps = S::c(NORM_EPS);
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let r = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        let inv = S::one() / (r + eps);
        row.mapv_inplace(|v| v * inv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check: builds the graph twice per coordinate.
    fn fd_check<F>(inputs: &[Array2<f64>], build: F)
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    {
        let run = |vals: &[Array2<f64>]| -> (f64, Vec<Array2<f64>>) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vals
                .iter()
                .map(|v| g.leaf(Arc::new(v.clone()), true))
                .collect();
            let out = build(&mut g, &ids);
            assert_eq!(g.value(out).dim(), (1, 1), "fd_check wants scalar output");
            let loss = g.value(out)[[0, 0]];
            let mut grads = g.backward(vec![(out, arr2(&[[1.0]]))]);
            let gs = ids
                .iter()
                .enumerate()
                .map(|(k, &id)| grads.take(id).unwrap_or_else(|| Array2::zeros(vals[k].dim())))
                .collect();
            (loss, gs)
        };

        let (_, analytic) = run(inputs);
        let h = 1e-6;
        for (ti, t) in inputs.iter().enumerate() {
            for idx in 0..t.len() {
                let (r, c) = (idx / t.ncols(), idx % t.ncols());
                let mut plus = inputs.to_vec();
                plus[ti][[r, c]] += h;
                let mut minus = inputs.to_vec();
                minus[ti][[r, c]] -= h;
                let (lp, _) = run(&plus);
                let (lm, _) = run(&minus);
                let num = (lp - lm) / (2.0 * h);
                let ana = analytic[ti][[r, c]];
                let rel = (ana - num).abs() / (ana.abs() + num.abs() + 1e-8);
                assert!(
                    rel < 1e-5,
                    "tensor {ti} coord ({r},{c}): analytic {ana} vs numeric {num}"
                );
            }
        }
    }

    /// Reduce a matrix node to sum(x ∘ W) for a fixed random W, so every
    /// element gets a distinct gradient path.
    fn reduce(g: &mut Graph<f64>, id: NodeId, seed: u64) -> NodeId {
        let (n, d) = g.value(id).dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(Array2::from_shape_fn((1, n * d), |_| rng.gen_range(-1.0..1.0)));
        let flat = g.reshape(id, 1, n * d);
        g.matmul_nt(flat, w)
    }

    #[test]
    fn fd_add_scale_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randm(&mut rng, 3, 4);
        let b = randm(&mut rng, 3, 4);
        let w = randm(&mut rng, 4, 2);
        fd_check(&[a, b, w], |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let s = g.scale(s, 1.7);
            let p = g.matmul(s, ids[2]);
            reduce(g, p, 11)
        });
    }

    #[test]
    fn fd_matmul_nt_add_row_add_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randm(&mut rng, 3, 4);
        let b = randm(&mut rng, 5, 4);
        let r = randm(&mut rng, 1, 5);
        fd_check(&[a, b, r], |g, ids| {
            let p = g.matmul_nt(ids[0], ids[1]);
            let p = g.add_row(p, ids[2]);
            let q = g.add_scaled(p, p, 0.3);
            reduce(g, q, 12)
        });
    }

    #[test]
    fn fd_gather_concat_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = randm(&mut rng, 6, 3);
        let u = randm(&mut rng, 2, 3);
        fd_check(&[t, u], |g, ids| {
            let picked = g.gather_rows(ids[0], Arc::from(vec![4usize, 1, 1, 5]));
            let cat = g.concat_rows(&[picked, ids[1]]);
            let sl = g.slice_rows(cat, 1, 4);
            let cols = g.slice_cols(sl, 1, 2);
            let both = g.concat_cols(&[cols, cols]);
            reduce(g, both, 13)
        });
    }

    #[test]
    fn fd_means_tile_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = randm(&mut rng, 6, 4);
        fd_check(&[t], |g, ids| {
            let m = g.mean_rows(ids[0]);
            let gm = g.group_mean_rows(ids[0], 2);
            let tiled = g.tile_rows(m, 3);
            let s = g.add(gm, tiled);
            let rs = g.reshape(s, 4, 3);
            reduce(g, rs, 14)
        });
    }

    #[test]
    fn fd_nonlinearities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = randm(&mut rng, 4, 5);
        fd_check(&[t.clone()], |g, ids| {
            let y = g.gelu(ids[0]);
            reduce(g, y, 15)
        });
        fd_check(&[t.clone()], |g, ids| {
            let y = g.softmax_rows(ids[0]);
            reduce(g, y, 16)
        });
        fd_check(&[t.clone()], |g, ids| {
            let y = g.log_softmax_rows(ids[0]);
            reduce(g, y, 17)
        });
        fd_check(&[t], |g, ids| {
            let y = g.l2_normalize_rows(ids[0]);
            reduce(g, y, 18)
        });
    }

    #[test]
    fn fd_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randm(&mut rng, 4, 6);
        let gamma = randm(&mut rng, 1, 6);
        let beta = randm(&mut rng, 1, 6);
        fd_check(&[x, gamma, beta], |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2]);
            reduce(g, y, 19)
        });
    }

    #[test]
    fn fd_nll_pick() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randm(&mut rng, 5, 4);
        fd_check(&[x], |g, ids| {
            let lp = g.log_softmax_rows(ids[0]);
            g.nll_pick_sum(lp, Arc::from(vec![2usize, 0, 3, 1, 1]))
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randm(&mut rng, 10, 7);
        let y = softmax_rows(&x);
        for row in y.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_graph_has_zero_grads() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.leaf(Arc::new(Array2::from_elem((2, 2), 1.5)), true);
        let c = g.constant(Array2::from_elem((1, 1), 3.0));
        let loss = g.sum_all(c);
        let mut grads = g.backward(vec![(loss, arr2(&[[1.0]]))]);
        assert!(grads.take(p).is_none(), "unused parameter must have no grad");
    }

    #[test]
    fn multi_seed_backward_accumulates() {
        // d/da of (sum(a) + 2·sum(a)) = 3
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Arc::new(Array2::from_elem((2, 3), 0.5)), true);
        let s1 = g.sum_all(a);
        let s2 = g.sum_all(a);
        let mut grads = g.backward(vec![(s1, arr2(&[[1.0]])), (s2, arr2(&[[2.0]]))]);
        let da = grads.take(a).unwrap();
        assert!(da.iter().all(|&x| (x - 3.0).abs() < 1e-12));
    }

    #[test]
    fn masked_softmax_is_exactly_insensitive_to_masked_logits() {
        let mask = arr2(&[[0.0, MASK_NEG], [0.0, 0.0]]);
        let a = arr2(&[[1.0f64, 123.0], [0.5, -0.25]]);
        let b = arr2(&[[1.0f64, -55.0], [0.5, -0.25]]);
        let ya = softmax_rows(&(a + &mask));
        let yb = softmax_rows(&(b + &mask));
        assert_eq!(ya.row(0), yb.row(0));
        assert_eq!(ya[[0, 1]], 0.0);
    }
}
