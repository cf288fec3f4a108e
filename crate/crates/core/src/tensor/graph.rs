use std::borrow::Cow;

use super::kernels::{self, gemm, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom`]: `(input value, output gradient) -> input gradient`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &Tensor) -> Tensor + Send + Sync>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Gelu(Var, bool),
    Sigmoid(Var),
    MaskedSoftmax(Var, Vec<bool>),
    NormalizeRows { x: Var, eps: f64, sqrt: bool },
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SegScores { q: Var, k: Var, seg: usize },
    SegWeightedSum { alpha: Var, v: Var, seg: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, include: Vec<bool>, count: usize },
    Sum(Var),
    Custom { x: Var, backward: BackwardFn },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node vector is already a topological order and backward walks it in reverse.
///
/// Parameters may be borrowed (`'p`) rather than copied into the graph.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Borrows a trainable tensor without copying it.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; zeros for nodes the loss does not reach.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor {
                shape: node.value.shape.clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(&node.value.shape),
        }
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor {
            shape: va.shape.clone(),
            data,
        };
        self.derived(t, op, &[a, b])
    }

    fn unary_map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.nodes[x.0].value.map(f);
        self.derived(t, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            View::normal(&self.nodes[a.0].value.data, k),
            View::normal(&self.nodes[b.0].value.data, n),
            0.0,
            &mut out,
        );
        Ok(self.derived(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn broadcast_row(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let cols = *self.shape(x).last().unwrap();
        let rlen = self.nodes[r.0].value.len();
        if rlen != cols && rlen != 1 {
            return Err(Error::shape(op, self.shape(x), self.shape(r)));
        }
        Ok(rlen)
    }

    /// Adds a row vector (length `cols`, or 1 for a scalar) to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let rlen = self.broadcast_row("add_row", x, r)?;
        let row = &self.nodes[r.0].value.data;
        let mut t = self.nodes[x.0].value.as_ref().clone();
        for (i, v) in t.data.iter_mut().enumerate() {
            *v += row[i % rlen];
        }
        Ok(self.derived(t, Op::AddRow(x, r), &[x, r]))
    }

    /// Scales each column of `x` by a row vector (length `cols`, or 1 for a scalar).
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let rlen = self.broadcast_row("mul_row", x, r)?;
        let row = &self.nodes[r.0].value.data;
        let mut t = self.nodes[x.0].value.as_ref().clone();
        for (i, v) in t.data.iter_mut().enumerate() {
            *v *= row[i % rlen];
        }
        Ok(self.derived(t, Op::MulRow(x, r), &[x, r]))
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary_map(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    /// GELU, exact `x·Φ(x)` unless `tanh_approx` is set.
    pub fn gelu(&mut self, x: Var, tanh_approx: bool) -> Var {
        self.unary_map(x, Op::Gelu(x, tanh_approx), |v| kernels::gelu(v, tanh_approx))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary_map(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    /// Row softmax restricted to `mask`-true entries; masked-false entries are exactly 0.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("masked_softmax", scores)?;
        if mask.len() != rows * cols {
            return Err(Error::shape("masked_softmax", &[rows, cols], &[mask.len()]));
        }
        let x = &self.nodes[scores.0].value.data;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let m = &mask[i * cols..(i + 1) * cols];
            let xr = &x[i * cols..(i + 1) * cols];
            let max = xr
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::precondition(
                    "masked_softmax",
                    format!("row {i} has no unmasked entry"),
                ));
            }
            let o = &mut out[i * cols..(i + 1) * cols];
            let mut total = 0.0;
            for j in 0..cols {
                if m[j] {
                    o[j] = (xr[j] - max).exp();
                    total += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor {
            shape: vec![rows, cols],
            data: out,
        };
        Ok(self.derived(t, Op::MaskedSoftmax(scores, mask.to_vec()), &[scores]))
    }

    /// Per-row `(x − μ) / D` where `D = σ² + ε`, or `√(σ² + ε)` when `sqrt` is set.
    pub fn normalize_rows(&mut self, x: Var, eps: f64, sqrt: bool) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("normalize_rows", x)?;
        let src = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = &src[i * cols..(i + 1) * cols];
            let (mean, var) = kernels::row_moments(r);
            let denom = if sqrt { (var + eps).sqrt() } else { var + eps };
            for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(r) {
                *o = (v - mean) / denom;
            }
        }
        let t = Tensor {
            shape: vec![rows, cols],
            data: out,
        };
        Ok(self.derived(t, Op::NormalizeRows { x, eps, sqrt }, &[x]))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, width) = self.matrix_dims("gather", table)?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::precondition(
                "gather",
                format!("id {bad} out of range for table with {vocab} rows"),
            ));
        }
        let src = &self.nodes[table.0].value.data;
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            out.extend_from_slice(&src[id * width..(id + 1) * width]);
        }
        let t = Tensor {
            shape: vec![ids.len(), width],
            data: out,
        };
        Ok(self.derived(t, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_cols", x)?;
        if start + width > cols || width == 0 {
            return Err(Error::shape("slice_cols", &[rows, cols], &[start, width]));
        }
        let src = &self.nodes[x.0].value.data;
        let mut out = Vec::with_capacity(rows * width);
        for i in 0..rows {
            out.extend_from_slice(&src[i * cols + start..i * cols + start + width]);
        }
        let t = Tensor {
            shape: vec![rows, width],
            data: out,
        };
        Ok(self.derived(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::precondition("concat_cols", "no inputs"))?;
        let (rows, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor {
            shape: vec![rows, total],
            data: out,
        };
        Ok(self.derived(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    fn segment_dims(&self, op: &'static str, a: Var, b: Var, seg: usize) -> Result<(usize, usize, usize)> {
        let (ra, ca) = self.matrix_dims(op, a)?;
        let (rb, cb) = self.matrix_dims(op, b)?;
        if seg == 0 || ra % seg != 0 || ra != rb {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok((ra / seg, ca, cb))
    }

    /// Blockwise `Q_s · K_sᵀ` over consecutive row segments of length `seg`.
    /// Output has shape `[rows × seg]`.
    pub fn seg_scores(&mut self, q: Var, k: Var, seg: usize) -> Result<Var> {
        let (segments, h, hk) = self.segment_dims("seg_scores", q, k, seg)?;
        if h != hk {
            return Err(Error::shape("seg_scores", self.shape(q), self.shape(k)));
        }
        let qd = &self.nodes[q.0].value.data;
        let kd = &self.nodes[k.0].value.data;
        let mut out = vec![0.0; segments * seg * seg];
        for s in 0..segments {
            let block = s * seg * h..(s + 1) * seg * h;
            gemm(
                seg,
                h,
                seg,
                View::normal(&qd[block.clone()], h),
                View::transposed(&kd[block], h),
                0.0,
                &mut out[s * seg * seg..(s + 1) * seg * seg],
            );
        }
        let t = Tensor {
            shape: vec![segments * seg, seg],
            data: out,
        };
        Ok(self.derived(t, Op::SegScores { q, k, seg }, &[q, k]))
    }

    /// Blockwise `A_s · V_s` where `alpha` is `[rows × seg]` and `v` is `[rows × w]`.
    pub fn seg_weighted_sum(&mut self, alpha: Var, v: Var, seg: usize) -> Result<Var> {
        let (segments, ca, w) = self.segment_dims("seg_weighted_sum", alpha, v, seg)?;
        if ca != seg {
            return Err(Error::shape("seg_weighted_sum", self.shape(alpha), self.shape(v)));
        }
        let ad = &self.nodes[alpha.0].value.data;
        let vd = &self.nodes[v.0].value.data;
        let mut out = vec![0.0; segments * seg * w];
        for s in 0..segments {
            gemm(
                seg,
                seg,
                w,
                View::normal(&ad[s * seg * seg..(s + 1) * seg * seg], seg),
                View::normal(&vd[s * seg * w..(s + 1) * seg * w], w),
                0.0,
                &mut out[s * seg * w..(s + 1) * seg * w],
            );
        }
        let t = Tensor {
            shape: vec![segments * seg, w],
            data: out,
        };
        Ok(self.derived(t, Op::SegWeightedSum { alpha, v, seg }, &[alpha, v]))
    }

    /// Mean negative log-likelihood of `onehot` under row-softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, onehot: &Tensor) -> Result<Var> {
        let (rows, k) = self.matrix_dims("cross_entropy", logits)?;
        if onehot.shape() != [rows, k] {
            return Err(Error::shape("cross_entropy", &[rows, k], onehot.shape()));
        }
        let mut targets = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = onehot.row(i);
            let ones = row.iter().filter(|&&x| x == 1.0).count();
            let zeros = row.iter().filter(|&&x| x == 0.0).count();
            if ones != 1 || zeros != k - 1 {
                return Err(Error::precondition(
                    "cross_entropy",
                    format!("row {i} is not one-hot: {row:?}"),
                ));
            }
            targets.push(row.iter().position(|&x| x == 1.0).unwrap());
        }
        self.cross_entropy_indices(logits, &targets, None)
    }

    /// Cross entropy from class indices, averaged over rows with `include[i]`
    /// (all rows when `include` is `None`).
    pub fn cross_entropy_indices(
        &mut self,
        logits: Var,
        targets: &[usize],
        include: Option<&[bool]>,
    ) -> Result<Var> {
        let (rows, k) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != rows || include.is_some_and(|m| m.len() != rows) {
            return Err(Error::shape("cross_entropy", &[rows, k], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::precondition(
                "cross_entropy",
                format!("target class {bad} out of range for {k} classes"),
            ));
        }
        let include = include.map_or_else(|| vec![true; rows], <[bool]>::to_vec);
        let count = include.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::precondition("cross_entropy", "no rows included in the loss"));
        }
        let x = &self.nodes[logits.0].value.data;
        let mut total = 0.0;
        for i in 0..rows {
            if !include[i] {
                continue;
            }
            let r = &x[i * k..(i + 1) * k];
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - r[targets[i]];
        }
        let t = Tensor::scalar(total / count as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            include,
            count,
        };
        Ok(self.derived(t, op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Unary op with a caller-supplied value and backward rule.
    pub fn custom(&mut self, x: Var, value: Tensor, backward: BackwardFn) -> Var {
        self.derived(value, Op::Custom { x, backward }, &[x])
    }

    /// Reverse-mode sweep from a scalar node. Fills gradients of every
    /// gradient-requiring node the loss reaches.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::precondition(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(c),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
                let n = val(*b).shape[1];
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, View::normal(g, n), View::transposed(&val(*b).data, n), 0.0, &mut da);
                    out.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, View::transposed(&val(*a).data, k), View::normal(g, n), 0.0, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    out.push((*b, g.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    out.push((*a, g.iter().zip(&val(*b).data).map(|(x, y)| x * y).collect()));
                }
                if needs(*b) {
                    out.push((*b, g.iter().zip(&val(*a).data).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddRow(x, r) => {
                if needs(*x) {
                    out.push((*x, g.to_vec()));
                }
                if needs(*r) {
                    let rlen = val(*r).len();
                    let mut dr = vec![0.0; rlen];
                    for (j, gv) in g.iter().enumerate() {
                        dr[j % rlen] += gv;
                    }
                    out.push((*r, dr));
                }
            }
            Op::MulRow(x, r) => {
                let row = &val(*r).data;
                let rlen = row.len();
                if needs(*x) {
                    out.push((*x, g.iter().enumerate().map(|(j, gv)| gv * row[j % rlen]).collect()));
                }
                if needs(*r) {
                    let mut dr = vec![0.0; rlen];
                    for (j, (gv, xv)) in g.iter().zip(&val(*x).data).enumerate() {
                        dr[j % rlen] += gv * xv;
                    }
                    out.push((*r, dr));
                }
            }
            Op::Affine(x, scale) => out.push((*x, g.iter().map(|v| v * scale).collect())),
            Op::Gelu(x, tanh_approx) => {
                let xd = &val(*x).data;
                out.push((*x, g.iter().zip(xd).map(|(gv, &xv)| gv * kernels::gelu_grad(xv, *tanh_approx)).collect()));
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                out.push((*x, g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect()));
            }
            Op::MaskedSoftmax(x, mask) => {
                let y = &node.value.data;
                let cols = node.value.shape[1];
                let mut dx = vec![0.0; y.len()];
                for (r, ((yr, gr), mr)) in y.chunks(cols).zip(g.chunks(cols)).zip(mask.chunks(cols)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        if mr[j] {
                            dx[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::NormalizeRows { x, eps, sqrt } => {
                let xv = val(*x);
                let cols = xv.shape[1];
                let n = cols as f64;
                let mut dx = vec![0.0; xv.len()];
                for (r, (xr, gr)) in xv.data.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let (mean, var) = kernels::row_moments(xr);
                    let (denom, ddenom) = if *sqrt {
                        let d = (var + eps).sqrt();
                        (d, 0.5 / d)
                    } else {
                        (var + eps, 1.0)
                    };
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gc: f64 = gr.iter().zip(xr).map(|(gv, xv)| gv * (xv - mean)).sum();
                    let coef = 2.0 * ddenom * gc / (n * denom * denom);
                    for j in 0..cols {
                        dx[r * cols + j] = (gr[j] - gmean) / denom - coef * (xr[j] - mean);
                    }
                }
                out.push((*x, dx));
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let w = tv.shape[1];
                let mut dt = vec![0.0; tv.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..w {
                        dt[id * w + j] += g[row * w + j];
                    }
                }
                out.push((*table, dt));
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let cols = xv.shape[1];
                let w = node.value.shape[1];
                let mut dx = vec![0.0; xv.len()];
                for (r, gr) in g.chunks(w).enumerate() {
                    dx[r * cols + start..r * cols + start + w].copy_from_slice(gr);
                }
                out.push((*x, dx));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.shape[1];
                    if needs(p) {
                        let mut dp = Vec::with_capacity(pv.len());
                        for gr in g.chunks(total) {
                            dp.extend_from_slice(&gr[offset..offset + w]);
                        }
                        out.push((p, dp));
                    }
                    offset += w;
                }
            }
            Op::SegScores { q, k, seg } => {
                let (qd, kd) = (&val(*q).data, &val(*k).data);
                let h = val(*q).shape[1];
                let segments = val(*q).shape[0] / seg;
                let (bs, gs) = (seg * h, seg * seg);
                if needs(*q) {
                    let mut dq = vec![0.0; qd.len()];
                    for s in 0..segments {
                        gemm(*seg, *seg, h, View::normal(&g[s * gs..(s + 1) * gs], *seg), View::normal(&kd[s * bs..(s + 1) * bs], h), 0.0, &mut dq[s * bs..(s + 1) * bs]);
                    }
                    out.push((*q, dq));
                }
                if needs(*k) {
                    let mut dk = vec![0.0; kd.len()];
                    for s in 0..segments {
                        gemm(*seg, *seg, h, View::transposed(&g[s * gs..(s + 1) * gs], *seg), View::normal(&qd[s * bs..(s + 1) * bs], h), 0.0, &mut dk[s * bs..(s + 1) * bs]);
                    }
                    out.push((*k, dk));
                }
            }
            Op::SegWeightedSum { alpha, v, seg } => {
                let (ad, vd) = (&val(*alpha).data, &val(*v).data);
                let w = val(*v).shape[1];
                let segments = val(*v).shape[0] / seg;
                let (as_, vs) = (seg * seg, seg * w);
                if needs(*alpha) {
                    let mut da = vec![0.0; ad.len()];
                    for s in 0..segments {
                        gemm(*seg, w, *seg, View::normal(&g[s * vs..(s + 1) * vs], w), View::transposed(&vd[s * vs..(s + 1) * vs], w), 0.0, &mut da[s * as_..(s + 1) * as_]);
                    }
                    out.push((*alpha, da));
                }
                if needs(*v) {
                    let mut dv = vec![0.0; vd.len()];
                    for s in 0..segments {
                        gemm(*seg, *seg, w, View::transposed(&ad[s * as_..(s + 1) * as_], *seg), View::normal(&g[s * vs..(s + 1) * vs], w), 0.0, &mut dv[s * vs..(s + 1) * vs]);
                    }
                    out.push((*v, dv));
                }
            }
            Op::CrossEntropy { logits, targets, include, count } => {
                let lv = val(*logits);
                let k = lv.shape[1];
                let scale = g[0] / *count as f64;
                let mut dx = vec![0.0; lv.len()];
                for (i, r) in lv.data.chunks(k).enumerate() {
                    if !include[i] {
                        continue;
                    }
                    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = r.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..k {
                        let p = (r[j] - max).exp() / z;
                        let target = if j == targets[i] { 1.0 } else { 0.0 };
                        dx[i * k + j] = scale * (p - target);
                    }
                }
                out.push((*logits, dx));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).len()])),
            Op::Custom { x, backward } => {
                let gt = Tensor {
                    shape: node.value.shape.clone(),
                    data: g.to_vec(),
                };
                out.push((*x, backward(val(*x), &gt).data));
            }
        }
        out.retain(|(v, _)| needs(*v));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);

        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_wrt_left() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]), true);
        let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).data(), &[3.0, 4.0]);
        assert_eq!(g.grad(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_cases() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&[vec![5.0, -1.0, 2.0]]));
        let y = g.masked_softmax(s, &[false, true, false]).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 0.0]);

        let s = g.constant(Tensor::from_rows(&[vec![0.7, 0.7, 0.7, 9.0]]));
        let y = g.masked_softmax(s, &[true, true, true, false]).unwrap();
        for &p in &g.value(y).data()[..3] {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }
        assert_eq!(g.value(y).data()[3], 0.0);

        // exp(k) / (e + e^2 + e^3)
        let s = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]));
        let y = g.masked_softmax(s, &[true; 3]).unwrap();
        let expected = [0.09003, 0.24473, 0.66524];
        for (p, e) in g.value(y).data().iter().zip(expected) {
            assert!(close(*p, e, 1e-5), "{p} vs {e}");
        }
    }

    #[test]
    fn masked_softmax_rejects_empty_row() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.masked_softmax(s, &[true, false, false, false]).unwrap_err();
        assert!(matches!(err, Error::Precondition { .. }));
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 1.0, 30.0, -30.0]));
        let y = g.gelu(x, false);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!(close(v[1], 0.84134, 1e-4));
        assert!(close(v[2], 30.0, 1e-12));
        assert!(v[3].abs() < 1e-12);
    }

    #[test]
    fn sigmoid_values_and_saturation() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 2.0, -1000.0, 1000.0]));
        let y = g.sigmoid(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!(close(v[1], 0.88080, 1e-5));
        assert!(v[2] >= 0.0 && v[2] < 1e-300 && !v[2].is_nan());
        assert_eq!(v[3], 1.0);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut g = Graph::new();
        let onehot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]]);
        let logits = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(logits, &onehot).unwrap();
        assert!(close(g.value(l).item(), 4f64.ln(), 1e-12));

        let logits = g.constant(Tensor::from_rows(&[vec![0.0, 20.0, 0.0, 0.0], vec![20.0, 0.0, 0.0, 0.0]]));
        let l = g.cross_entropy(logits, &onehot).unwrap();
        assert!(g.value(l).item() < 0.01);
    }

    #[test]
    fn cross_entropy_hand_case() {
        // Independent log-sum-exp evaluation, row by row.
        let rows = [[0.5, -1.0, 2.0, 0.0], [1.5, 1.5, -0.3, 0.2]];
        let targets = [2usize, 0];
        let expected: f64 = rows
            .iter()
            .zip(targets)
            .map(|(r, t)| {
                let z: f64 = r.iter().map(|v: &f64| v.exp()).sum();
                z.ln() - r[t]
            })
            .sum::<f64>()
            / 2.0;
        let mut g = Graph::new();
        let logits = g.constant(Tensor::from_rows(&[rows[0].to_vec(), rows[1].to_vec()]));
        let mut onehot = Tensor::zeros(&[2, 4]);
        onehot.data_mut()[2] = 1.0;
        onehot.data_mut()[4] = 1.0;
        let l = g.cross_entropy(logits, &onehot).unwrap();
        assert!(close(g.value(l).item(), expected, 1e-8));
    }

    #[test]
    fn cross_entropy_rejects_non_onehot() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 4]));
        let bad = Tensor::from_rows(&[vec![0.5, 0.5, 0.0, 0.0]]);
        assert!(g.cross_entropy(logits, &bad).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::from_rows(&[vec![1e4, -1e4, 0.0, 5e3]]), true);
        let s = g.masked_softmax(logits, &[true; 4]).unwrap();
        let y = g.sigmoid(logits);
        let z = g.gelu(logits, false);
        let l = g.cross_entropy_indices(logits, &[1], None).unwrap();
        g.backward(l).unwrap();
        for v in [s, y, z, l] {
            assert!(g.value(v).is_finite());
        }
        assert!(g.grad(logits).is_finite());
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 4.0, 6.0]);
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreachable_params_have_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let unused = g.leaf(Tensor::zeros(&[2, 2]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn zero_variance_row_normalizes_to_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.1; 7], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]]));
        let y = g.normalize_rows(x, 1e-5, false).unwrap();
        assert!(g.value(y).row(0).iter().all(|&v| v == 0.0));
    }
}
