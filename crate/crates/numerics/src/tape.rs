//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! Every operation evaluates eagerly and records enough state for its
//! backward pass. Parameters live outside the tape and are referenced by
//! index, so binding a large embedding table costs nothing.
//!
//! The backward sweep visits nodes in reverse recording order and all
//! accumulations run in ascending index order. Identical recordings
//! therefore produce bitwise identical gradients.

use std::sync::Arc;

use crate::kernels::{self, NormStats};
use crate::matrix::{dot, Matrix, Real};

/// Handle to a value on a [`Tape`]. Ids below the parameter count refer to parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters occupy the first tape slots in store order.
impl From<crate::params::ParamId> for Var {
    fn from(id: crate::params::ParamId) -> Var {
        Var(id.0)
    }
}

/// Compressed list-of-lists: group `g` owns `members[offsets[g]..offsets[g + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Groups {
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl Groups {
    pub fn from_lists<I, L>(lists: I) -> Self
    where
        I: IntoIterator<Item = L>,
        L: AsRef<[usize]>,
    {
        let mut offsets = vec![0];
        let mut members = Vec::new();
        for l in lists {
            members.extend_from_slice(l.as_ref());
            offsets.push(members.len());
        }
        Self { offsets, members }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn group(&self, g: usize) -> &[usize] {
        &self.members[self.offsets[g]..self.offsets[g + 1]]
    }

    fn span(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn total_members(&self) -> usize {
        self.members.len()
    }

    pub fn max_member(&self) -> Option<usize> {
        self.members.iter().copied().max()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.len()).map(move |g| self.group(g))
    }
}

enum Op<T> {
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Matrix<T>),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    ConcatCols(Var, Var),
    VStack(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    SoftmaxRows(Var),
    GatherMean(Var, Arc<Groups>),
    SelectRows {
        base: Var,
        over: Var,
        take_over: Arc<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix<T>,
        stats: Vec<NormStats<T>>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    SetAttention {
        query: Var,
        keys: Var,
        values: Var,
        groups: Arc<Groups>,
        heads: usize,
        weights: Vec<T>,
    },
    BceMean {
        logits: Var,
        targets: Matrix<T>,
    },
    SoftmaxCeMean {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix<T>,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub struct Tape<'p, T: Real> {
    params: &'p [Matrix<T>],
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p [Matrix<T>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter index {index} out of range");
        Var(index)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix<T> {
        if v.0 < self.params.len() {
            &self.params[v.0]
        } else {
            &self.nodes[v.0 - self.params.len()].value
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.params.len() + self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.row(0).to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// Elementwise product with a fixed matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Matrix<T>) -> Var {
        assert_eq!(self.shape(a), mask.shape(), "mul_const shape mismatch");
        let mut value = self.value(a).clone();
        for (x, &m) in value.data_mut().iter_mut().zip(mask.data()) {
            *x *= m;
        }
        self.push(value, Op::MulConst(a, mask))
    }

    /// Elementwise product of two same-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let mut value = self.value(a).clone();
        for (x, &y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let mut value = self.value(a).clone();
        value.scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for x in value.data_mut() {
            if *x < T::zero() {
                *x = T::zero();
            }
        }
        self.push(value, Op::Relu(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat_cols row mismatch");
        let cols = va.cols() + vb.cols();
        let mut data = Vec::with_capacity(va.rows() * cols);
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let value = Matrix::from_vec(va.rows(), cols, data);
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "vstack of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "vstack width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::VStack(parts.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Sum of all entries as a `1×1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            kernels::softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row `g` of the output is the mean of the rows of `a` listed in group `g`;
    /// an empty group yields a zero row.
    pub fn gather_mean(&mut self, a: Var, groups: Arc<Groups>) -> Var {
        let src = self.value(a);
        let width = src.cols();
        if let Some(max) = groups.max_member() {
            assert!(max < src.rows(), "gather_mean member {max} out of range");
        }
        let mut data = Vec::with_capacity(groups.len() * width);
        for g in groups.iter() {
            data.extend(kernels::masked_mean(src.data(), width, g));
        }
        let value = Matrix::from_vec(groups.len(), width, data);
        self.push(value, Op::GatherMean(a, groups))
    }

    /// Rows of `over` where `take_over[r]`, rows of `base` elsewhere.
    pub fn select_rows(&mut self, base: Var, over: Var, take_over: Arc<Vec<bool>>) -> Var {
        let (vb, vo) = (self.value(base), self.value(over));
        assert_eq!(vb.shape(), vo.shape(), "select_rows shape mismatch");
        assert_eq!(take_over.len(), vb.rows(), "select_rows mask length mismatch");
        let mut value = vb.clone();
        for (r, &take) in take_over.iter().enumerate() {
            if take {
                value.row_mut(r).copy_from_slice(vo.row(r));
            }
        }
        self.push(value, Op::SelectRows { base, over, take_over })
    }

    /// Row-wise layer normalization with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let vx = self.value(x);
        let g = self.value(gain).row(0);
        let b = self.value(bias).row(0);
        let (rows, cols) = vx.shape();
        let ones = vec![T::one(); cols];
        let zeros = vec![T::zero(); cols];
        let mut normalized = Matrix::zeros(rows, cols);
        let mut value = Matrix::zeros(rows, cols);
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            stats.push(kernels::layer_norm_into(
                vx.row(r),
                &ones,
                &zeros,
                eps,
                normalized.row_mut(r),
            ));
            for c in 0..cols {
                value.row_mut(r)[c] = g[c] * normalized.get(r, c) + b[c];
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                stats,
            },
        )
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.rows());
        let floor = T::of(1e-12);
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = dot(row, row).sqrt().max(floor);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(value, Op::L2Normalize { x, norms })
    }

    /// Multi-head attention pooling with a learned `1×F` query.
    ///
    /// For group `g` and head `h` (width `F/heads`), the output slice is
    /// `softmax(q_h · K[r]_h for r in g) · V[r]_h`. Empty groups pool to zero.
    pub fn set_attention(
        &mut self,
        query: Var,
        keys: Var,
        values: Var,
        groups: Arc<Groups>,
        heads: usize,
    ) -> Var {
        let q = self.value(query);
        let k = self.value(keys);
        let v = self.value(values);
        let width = q.cols();
        assert_eq!(q.rows(), 1, "set_attention query must be a row vector");
        assert_eq!(k.cols(), width, "set_attention key width mismatch");
        assert_eq!(v.shape(), k.shape(), "set_attention key/value shape mismatch");
        assert!(heads > 0 && width % heads == 0, "width not divisible by heads");
        if let Some(max) = groups.max_member() {
            assert!(max < k.rows(), "set_attention member {max} out of range");
        }
        let dh = width / heads;
        let q = q.row(0);
        let mut out = Matrix::zeros(groups.len(), width);
        let mut weights = vec![T::zero(); groups.total_members() * heads];
        let mut logits = Vec::new();
        for g in 0..groups.len() {
            let span = groups.span(g);
            let members = groups.group(g);
            if members.is_empty() {
                continue;
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                logits.clear();
                logits.extend(
                    members
                        .iter()
                        .map(|&r| dot(&q[cols.clone()], &k.row(r)[cols.clone()])),
                );
                kernels::softmax_in_place(&mut logits);
                let o = &mut out.row_mut(g)[cols.clone()];
                for (idx, (&r, &a)) in members.iter().zip(&logits).enumerate() {
                    weights[(span.start + idx) * heads + h] = a;
                    for (x, &val) in o.iter_mut().zip(&v.row(r)[cols.clone()]) {
                        *x += a * val;
                    }
                }
            }
        }
        self.push(
            out,
            Op::SetAttention {
                query,
                keys,
                values,
                groups,
                heads,
                weights,
            },
        )
    }

    /// Mean binary cross-entropy with logits over every entry of `logits`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Matrix<T>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce target shape mismatch");
        assert!(!z.is_empty(), "bce over no entries");
        let mut total = T::zero();
        for (&x, &t) in z.data().iter().zip(targets.data()) {
            total += kernels::softplus(x) - t * x;
        }
        let loss = total / T::of(z.len() as f64);
        self.push(Matrix::scalar(loss), Op::BceMean { logits, targets })
    }

    /// Mean softmax cross-entropy; row `r` of `logits` has target class `targets[r]`.
    pub fn softmax_cross_entropy_mean(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows(), targets.len(), "cross-entropy target count mismatch");
        assert!(z.rows() > 0, "cross-entropy over no rows");
        let mut probs = Matrix::zeros(z.rows(), z.cols());
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < z.cols(), "target class {t} out of range");
            let row = z.row(r);
            total += kernels::log_sum_exp(row) - row[t];
            probs.row_mut(r).copy_from_slice(row);
            kernels::softmax_in_place(probs.row_mut(r));
        }
        let loss = total / T::of(z.rows() as f64);
        self.push(
            Matrix::scalar(loss),
            Op::SoftmaxCeMean {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Gradients of a scalar `loss` with respect to everything on the tape.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar value");
        self.backward_seeded(&[(loss, Matrix::scalar(T::one()))])
    }

    /// Backward sweep starting from arbitrary upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Matrix<T>)]) -> Gradients<T> {
        let np = self.params.len();
        let mut grads: Vec<Option<Matrix<T>>> = Vec::new();
        grads.resize_with(np + self.nodes.len(), || None);
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed gradient shape mismatch");
            accumulate(&mut grads, *v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[np + idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[np + idx] = Some(g);
        }
        Gradients {
            grads,
            num_params: np,
        }
    }

    fn backprop_node(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(self.value(*b));
                let gb = self.value(*a).t_matmul(g);
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g);
                let mut gr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (x, &y) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                accumulate(grads, *row, &gr);
            }
            Op::MulConst(a, mask) => {
                let mut ga = g.clone();
                for (x, &m) in ga.data_mut().iter_mut().zip(mask.data()) {
                    *x *= m;
                }
                accumulate(grads, *a, &ga);
            }
            Op::Mul(a, b) => {
                let mut ga = g.clone();
                for (x, &y) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *x *= y;
                }
                let mut gb = g.clone();
                for (x, &y) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *x *= y;
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Scale(a, factor) => {
                let mut ga = g.clone();
                ga.scale(*factor);
                accumulate(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (x, &y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *x = T::zero();
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut ga = Matrix::zeros(g.rows(), ca);
                let mut gb = Matrix::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::VStack(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let slice = g.data()[start * cols..(start + rows) * cols].to_vec();
                    accumulate(grads, p, &Matrix::from_vec(rows, cols, slice));
                    start += rows;
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, &g.transpose()),
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                accumulate(grads, *a, &Matrix::filled(rows, cols, g.item()));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = dot(y.row(r), g.row(r));
                    for c in 0..y.cols() {
                        ga.row_mut(r)[c] = y.get(r, c) * (g.get(r, c) - inner);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::GatherMean(a, groups) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Matrix::zeros(rows, cols);
                for gi in 0..groups.len() {
                    let members = groups.group(gi);
                    if members.is_empty() {
                        continue;
                    }
                    let inv = T::one() / T::of(members.len() as f64);
                    for &r in members {
                        for (x, &y) in ga.row_mut(r).iter_mut().zip(g.row(gi)) {
                            *x += y * inv;
                        }
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::SelectRows {
                base,
                over,
                take_over,
            } => {
                let mut gb = g.clone();
                let mut go = Matrix::zeros(g.rows(), g.cols());
                for (r, &take) in take_over.iter().enumerate() {
                    if take {
                        go.row_mut(r).copy_from_slice(g.row(r));
                        gb.row_mut(r).iter_mut().for_each(|x| *x = T::zero());
                    }
                }
                accumulate(grads, *base, &gb);
                accumulate(grads, *over, &go);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                stats,
            } => {
                let (rows, cols) = normalized.shape();
                let gv = self.value(*gain).row(0);
                let mut gg = Matrix::zeros(1, cols);
                let mut gbias = Matrix::zeros(1, cols);
                let mut gx = Matrix::zeros(rows, cols);
                let n = T::of(cols as f64);
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let xhat = normalized.row(r);
                    let dy = g.row(r);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for c in 0..cols {
                        gg.row_mut(0)[c] += dy[c] * xhat[c];
                        gbias.row_mut(0)[c] += dy[c];
                        dxhat[c] = dy[c] * gv[c];
                        sum_d += dxhat[c];
                        sum_dx += dxhat[c] * xhat[c];
                    }
                    let inv = stats[r].inv_std / n;
                    for c in 0..cols {
                        gx.row_mut(r)[c] = inv * (n * dxhat[c] - sum_d - xhat[c] * sum_dx);
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *gain, &gg);
                accumulate(grads, *bias, &gbias);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dy = g.row(r);
                    let proj = dot(yr, dy);
                    for c in 0..y.cols() {
                        gx.row_mut(r)[c] = (dy[c] - yr[c] * proj) / norms[r];
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::SetAttention {
                query,
                keys,
                values,
                groups,
                heads,
                weights,
            } => {
                let q = self.value(*query);
                let k = self.value(*keys);
                let v = self.value(*values);
                let width = q.cols();
                let dh = width / heads;
                let q = q.row(0);
                let mut gq = Matrix::zeros(1, width);
                let mut gk = Matrix::zeros(k.rows(), width);
                let mut gv = Matrix::zeros(v.rows(), width);
                let mut dalpha = Vec::new();
                for gi in 0..groups.len() {
                    let span = groups.span(gi);
                    let members = groups.group(gi);
                    if members.is_empty() {
                        continue;
                    }
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        let go = &g.row(gi)[cols.clone()];
                        dalpha.clear();
                        let mut weighted = T::zero();
                        for (idx, &r) in members.iter().enumerate() {
                            let a = weights[(span.start + idx) * heads + h];
                            let da = dot(go, &v.row(r)[cols.clone()]);
                            weighted += a * da;
                            dalpha.push(da);
                            for (x, &y) in gv.row_mut(r)[cols.clone()].iter_mut().zip(go) {
                                *x += a * y;
                            }
                        }
                        for (idx, &r) in members.iter().enumerate() {
                            let a = weights[(span.start + idx) * heads + h];
                            let dlogit = a * (dalpha[idx] - weighted);
                            for (x, &kv) in gq.row_mut(0)[cols.clone()]
                                .iter_mut()
                                .zip(&k.row(r)[cols.clone()])
                            {
                                *x += dlogit * kv;
                            }
                            for (x, &qv) in gk.row_mut(r)[cols.clone()].iter_mut().zip(&q[cols.clone()])
                            {
                                *x += dlogit * qv;
                            }
                        }
                    }
                }
                accumulate(grads, *query, &gq);
                accumulate(grads, *keys, &gk);
                accumulate(grads, *values, &gv);
            }
            Op::BceMean { logits, targets } => {
                let z = self.value(*logits);
                let scale = g.item() / T::of(z.len() as f64);
                let data = z
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &t)| (kernels::sigmoid(x) - t) * scale)
                    .collect();
                accumulate(grads, *logits, &Matrix::from_vec(z.rows(), z.cols(), data));
            }
            Op::SoftmaxCeMean {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / T::of(targets.len() as f64);
                let mut gz = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = gz.row_mut(r);
                    row[t] -= T::one();
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                }
                accumulate(grads, *logits, &gz);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: &Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    num_params: usize,
}

impl<T: Real> Gradients<T> {
    /// `None` when no gradient reached `v`.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients in parameter order; untouched parameters get zeros.
    pub fn param_grads(&self, params: &[Matrix<T>]) -> Vec<Matrix<T>> {
        assert_eq!(params.len(), self.num_params);
        params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.grads[i]
                    .clone()
                    .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
            })
            .collect()
    }
}
