use std::borrow::Cow;

use super::tensor::gemm_into;
use super::{Float, Gradients, NumericError, ParamId, ParamStore, Result, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    AddRow { x: usize, bias: usize },
    Scale(usize, T),
    ScaleBy { x: usize, s: usize },
    Exp(usize),
    Sum(usize),
    Gelu(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax(usize),
    Gather { table: usize, ids: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    MeanPool { x: usize, rows: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Tensor<T> },
    L2Normalize { x: usize, norms: Vec<T> },
}

struct Node<'p, T: Float> {
    op: Op<T>,
    value: Cow<'p, Tensor<T>>,
    requires_grad: bool,
}

/// Define-by-run tape. Parameters are borrowed from a [`ParamStore`] and
/// every parameter appears at most once, so gradients from all of its uses
/// accumulate into one buffer.
pub struct Graph<'p, T: Float> {
    params: Option<&'p ParamStore<T>>,
    param_nodes: Vec<Option<usize>>,
    nodes: Vec<Node<'p, T>>,
}

fn mismatch(op: &'static str, a: &Tensor<impl Float>, b: &Tensor<impl Float>) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu<T: Float>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::of(0.044715) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0 * 0.044715) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    /// A graph over inputs only.
    pub fn without_params() -> Self {
        Self {
            params: None,
            param_nodes: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[usize]) -> Var {
        debug_assert!(value.is_finite() || inputs.iter().any(|&i| !self.val(i).is_finite()));
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, t, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self.params.ok_or(NumericError::NoParams)?;
        if id.0 >= store.len() {
            return Err(NumericError::IndexOutOfBounds {
                index: id.0,
                len: store.len(),
            });
        }
        if let Some(i) = self.param_nodes[id.0] {
            return Ok(Var(i));
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Cow::Borrowed(store.get(id)),
            requires_grad: true,
        });
        let i = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(i);
        Ok(Var(i))
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = self.val(a.0).matmul(self.val(b.0), trans_b)?;
        Ok(self.push(
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            out,
            &[a.0, b.0],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(Op::Add(a.0, b.0), out, &[a.0, b.0]))
    }

    /// Add a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x.0), self.val(bias.0));
        if tb.len() != tx.cols() {
            return Err(mismatch("add_row", tx, tb));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRow { x: x.0, bias: bias.0 }, out, &[x.0, bias.0]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.val(x.0).map(|v| v * c);
        self.push(Op::Scale(x.0, c), out, &[x.0])
    }

    /// Multiply by a scalar node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.val(x.0), self.val(s.0));
        if !ts.is_scalar() {
            return Err(mismatch("scale_by", tx, ts));
        }
        let c = ts.item();
        let out = tx.map(|v| v * c);
        Ok(self.push(Op::ScaleBy { x: x.0, s: s.0 }, out, &[x.0, s.0]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.val(x.0).map(T::exp);
        self.push(Op::Exp(x.0), out, &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x.0).data().iter().copied().sum();
        self.push(Op::Sum(x.0), Tensor::scalar(s), &[x.0])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.val(x.0).map(gelu);
        self.push(Op::Gelu(x.0), out, &[x.0])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.val(x.0);
        let (tg, tb) = (self.val(gamma.0), self.val(beta.0));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let mut out = tx.clone();
        let mut xhat = vec![T::zero(); tx.len()];
        let mut inv_std = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let o = out.row_mut(r);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                o[j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            out,
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// Row-wise softmax. Columns with `key_mask[j] == false` get probability
    /// zero; a row with no allowed column is all zeros.
    pub fn softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.val(x.0);
        let c = tx.cols();
        if let Some(m) = key_mask {
            if m.len() != c {
                return Err(NumericError::ShapeMismatch {
                    op: "softmax",
                    left: tx.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let allowed = |j: usize| key_mask.is_none_or(|m| m[j]);
        let mut out = Tensor::zeros(tx.shape());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let max = (0..c)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let o = out.row_mut(r);
            let mut z = T::zero();
            for j in 0..c {
                if allowed(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v = *v / z;
            }
        }
        Ok(self.push(Op::Softmax(x.0), out, &[x.0]))
    }

    /// Rows `ids` of `table`, in order (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.val(table.0);
        let d = tt.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= tt.rows() {
                return Err(NumericError::IndexOutOfBounds {
                    index: i,
                    len: tt.rows(),
                });
            }
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            out,
            &[table.0],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let tx = self.val(x.0);
        if start + width > tx.cols() {
            return Err(NumericError::ShapeMismatch {
                op: "slice_cols",
                left: tx.shape().to_vec(),
                right: vec![start, width],
            });
        }
        let mut data = Vec::with_capacity(tx.rows() * width);
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..start + width]);
        }
        let out = Tensor::new(vec![tx.rows(), width], data)?;
        Ok(self.push(Op::SliceCols { x: x.0, start }, out, &[x.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.val(p.0).rows());
        let mut cols = 0;
        for p in parts {
            let t = self.val(p.0);
            if t.rows() != rows {
                return Err(mismatch("concat_cols", self.val(parts[0].0), t));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.val(p.0).row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatCols(ids.clone()), out, &ids))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |p| self.val(p.0).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.val(p.0);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.val(parts[0].0), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(ids.clone()), out, &ids))
    }

    /// Mean of the rows where `mask` is true, as a `1×d` row.
    pub fn mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = self.val(x.0);
        if mask.len() != tx.rows() {
            return Err(NumericError::ShapeMismatch {
                op: "mean_pool",
                left: tx.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(NumericError::EmptySelection("mean_pool"));
        }
        let d = tx.cols();
        let mut acc = vec![T::zero(); d];
        for &r in &rows {
            for (a, &v) in acc.iter_mut().zip(tx.row(r)) {
                *a += v;
            }
        }
        let n = T::of(rows.len() as f64);
        for a in &mut acc {
            *a = *a / n;
        }
        let out = Tensor::new(vec![1, d], acc)?;
        Ok(self.push(Op::MeanPool { x: x.0, rows }, out, &[x.0]))
    }

    /// Sum over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.val(logits.0);
        if targets.len() != tl.rows() || tl.shape().len() != 2 {
            return Err(NumericError::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let c = tl.cols();
        let mut probs = Tensor::zeros(tl.shape());
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(NumericError::IndexOutOfBounds { index: t, len: c });
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[t];
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            &[logits.0],
        ))
    }

    /// Scale every row to unit Euclidean length.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x.0);
        let mut out = tx.clone();
        let mut norms = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let n = tx.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(NumericError::ZeroNorm);
            }
            norms.push(n);
            for v in out.row_mut(r) {
                *v = *v / n;
            }
        }
        Ok(self.push(Op::L2Normalize { x: x.0, norms }, out, &[x.0]))
    }

    /// Reverse pass from a scalar node. Each node is visited once, in
    /// reverse creation order (a topological order of the tape).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut out = Gradients::empty(n_params);
        let lv = self.val(loss.0);
        if !lv.is_scalar() {
            return Err(NumericError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = Acc {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, g),
                &Op::MatMul { a, b, trans_b } => {
                    let (ta, tb) = (self.val(a), self.val(b));
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = g.cols();
                    if let Some(da) = acc.slot(a) {
                        // dA = G · Bᵀ (or G · B when B was transposed)
                        let (rsb, csb) = if trans_b {
                            (k as isize, 1)
                        } else {
                            (1, n as isize)
                        };
                        gemm_into(m, n, k, g.data(), n as isize, 1, tb.data(), rsb, csb, da.data_mut(), T::one());
                    }
                    if let Some(db) = acc.slot(b) {
                        if trans_b {
                            // dB[n×k] = Gᵀ · A
                            gemm_into(n, m, k, g.data(), 1, n as isize, ta.data(), k as isize, 1, db.data_mut(), T::one());
                        } else {
                            // dB[k×n] = Aᵀ · G
                            gemm_into(k, m, n, ta.data(), 1, k as isize, g.data(), n as isize, 1, db.data_mut(), T::one());
                        }
                    }
                }
                &Op::Add(a, b) => {
                    acc.add(a, &g);
                    acc.add(b, &g);
                }
                &Op::AddRow { x, bias } => {
                    acc.add(x, &g);
                    if let Some(db) = acc.slot(bias) {
                        for r in 0..g.rows() {
                            for (d, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                    }
                }
                &Op::Scale(x, c) => acc.add(x, &g.map(|v| v * c)),
                &Op::ScaleBy { x, s } => {
                    let c = self.val(s).item();
                    acc.add(x, &g.map(|v| v * c));
                    if let Some(ds) = acc.slot(s) {
                        let dot: T = g.data().iter().zip(self.val(x).data()).map(|(&a, &b)| a * b).sum();
                        ds.data_mut()[0] += dot;
                    }
                }
                &Op::Exp(x) => {
                    if let Some(dx) = acc.slot(x) {
                        for ((d, &gv), &y) in dx.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                            *d += gv * y;
                        }
                    }
                }
                &Op::Sum(x) => {
                    let gv = g.item();
                    if let Some(dx) = acc.slot(x) {
                        for d in dx.data_mut() {
                            *d += gv;
                        }
                    }
                }
                &Op::Gelu(x) => {
                    if let Some(dx) = acc.slot(x) {
                        for ((d, &gv), &xv) in dx.data_mut().iter_mut().zip(g.data()).zip(self.val(x).data()) {
                            *d += gv * gelu_grad(xv);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = g.cols();
                    let gam = self.val(*gamma).data();
                    if let Some(dg) = acc.slot(*gamma) {
                        for r in 0..g.rows() {
                            for j in 0..d {
                                dg.data_mut()[j] += g.row(r)[j] * xhat[r * d + j];
                            }
                        }
                    }
                    if let Some(db) = acc.slot(*beta) {
                        for r in 0..g.rows() {
                            for (b, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *b += v;
                            }
                        }
                    }
                    if let Some(dx) = acc.slot(*x) {
                        let inv_d = T::one() / T::of(d as f64);
                        for r in 0..g.rows() {
                            let gr = g.row(r);
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut mean_dh = T::zero();
                            let mut mean_dh_xh = T::zero();
                            for j in 0..d {
                                let dh = gr[j] * gam[j];
                                mean_dh += dh;
                                mean_dh_xh += dh * xh[j];
                            }
                            mean_dh = mean_dh * inv_d;
                            mean_dh_xh = mean_dh_xh * inv_d;
                            let out = dx.row_mut(r);
                            for j in 0..d {
                                let dh = gr[j] * gam[j];
                                out[j] += inv_std[r] * (dh - mean_dh - xh[j] * mean_dh_xh);
                            }
                        }
                    }
                }
                &Op::Softmax(x) => {
                    if let Some(dx) = acc.slot(x) {
                        let y = &node.value;
                        for r in 0..g.rows() {
                            let (gr, yr) = (g.row(r), y.row(r));
                            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                                *d += yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    if let Some(dt) = acc.slot(*table) {
                        for (r, &id) in ids.iter().enumerate() {
                            for (d, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                    }
                }
                &Op::SliceCols { x, start } => {
                    if let Some(dx) = acc.slot(x) {
                        let w = g.cols();
                        for r in 0..g.rows() {
                            for (d, &v) in dx.row_mut(r)[start..start + w].iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.val(p).cols();
                        if let Some(dp) = acc.slot(p) {
                            for r in 0..g.rows() {
                                for (d, &v) in dp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                    *d += v;
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.val(p).len();
                        if let Some(dp) = acc.slot(p) {
                            for (d, &v) in dp.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                                *d += v;
                            }
                        }
                        offset += len;
                    }
                }
                Op::MeanPool { x, rows } => {
                    if let Some(dx) = acc.slot(*x) {
                        let inv = T::one() / T::of(rows.len() as f64);
                        for &r in rows {
                            for (d, &v) in dx.row_mut(r).iter_mut().zip(g.data()) {
                                *d += v * inv;
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let gv = g.item();
                    if let Some(dl) = acc.slot(*logits) {
                        for (r, &t) in targets.iter().enumerate() {
                            let row = dl.row_mut(r);
                            for (d, &p) in row.iter_mut().zip(probs.row(r)) {
                                *d += gv * p;
                            }
                            row[t] -= gv;
                        }
                    }
                }
                Op::L2Normalize { x, norms } => {
                    if let Some(dx) = acc.slot(*x) {
                        let y = &node.value;
                        for r in 0..g.rows() {
                            let (gr, yr) = (g.row(r), y.row(r));
                            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                                *d += (gv - yv * dot) / norms[r];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

struct Acc<'a, 'p, T: Float> {
    nodes: &'a [Node<'p, T>],
    grads: &'a mut Vec<Option<Tensor<T>>>,
}

impl<T: Float> Acc<'_, '_, T> {
    /// Gradient buffer of node `i`, created on first use; `None` when the
    /// node does not lead to any parameter.
    fn slot(&mut self, i: usize) -> Option<&mut Tensor<T>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let shape = self.nodes[i].value.shape();
        Some(self.grads[i].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn add(&mut self, i: usize, g: &Tensor<T>) {
        if let Some(d) = self.slot(i) {
            d.add_assign(g);
        }
    }
}
