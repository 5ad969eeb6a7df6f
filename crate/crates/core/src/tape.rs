//! Reverse-mode gradient tape over the fixed op vocabulary used by the
//! encoders, the classifier and the alignment losses.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep is a single reverse pass.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{dim, Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamSet};
use crate::tensor::{self, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Rows with a Euclidean norm below this pass through `l2_normalize`
/// unchanged.
pub const NORM_GUARD: f64 = 1e-12;

/// Handle to a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Ln1p(usize),
    WeightedSum(usize, Vec<f64>),
    Mean(usize),
    RowSum(usize),
    SubRowDiag(usize),
    MeanScalars(Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    L2NormalizeRows(usize),
    SqDist(usize, usize),
    MultiGaussian(usize, Vec<f64>),
    SoftmaxXent(usize, Vec<u8>),
    ConvMaxPool {
        input: usize,
        weight: usize,
        bias: usize,
        width: usize,
        // Winning window start per (batch, filter); `usize::MAX` when the
        // pooled value was clipped by the ReLU.
        argmax: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable does not belong to this tape"));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.index].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a trainable parameter; its gradient is routed back to `id`.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    fn mat(&self, i: usize, ctx: &'static str) -> Result<(usize, usize)> {
        self.nodes[i].value.expect_matrix(ctx)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (n, k) = self.mat(ia, "matmul lhs")?;
        let (k2, m) = self.mat(ib, "matmul rhs")?;
        dim("matmul inner", k, k2)?;
        let out = tensor::matmul(self.nodes[ia].value.data(), self.nodes[ib].value.data(), n, k, m);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(ia, ib)))
    }

    /// `a · bᵀ` for `a: n×k`, `b: m×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (n, k) = self.mat(ia, "matmul_t lhs")?;
        let (m, k2) = self.mat(ib, "matmul_t rhs")?;
        dim("matmul_t inner", k, k2)?;
        let (ad, bd) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = tensor::dot(&ad[i * k..(i + 1) * k], &bd[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMulT(ia, ib)))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(b)?);
        let (n, m) = self.mat(ix, "add_bias input")?;
        dim("bias width", m, self.nodes[ib].value.len())?;
        let bias = self.nodes[ib].value.data();
        let mut out = self.nodes[ix].value.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::AddBias(ix, ib)))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        ctx: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                context: ctx,
                expected: ta.len(),
                actual: tb.len(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, op(ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(t, op(ix)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        let data = t.data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Scale(ix, c)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, libm::exp, Op::Exp)
    }

    pub fn ln_1p(&mut self, x: Var) -> Result<Var> {
        self.map(x, libm::log1p, Op::Ln1p)
    }

    /// `Σ wᵢ xᵢ` over all entries, as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        dim("weighted_sum weights", t.len(), weights.len())?;
        let s = tensor::dot(t.data(), &weights);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(ix, weights)))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        if t.is_empty() {
            return Err(Error::Tape("mean of an empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(ix)))
    }

    /// Row sums of an `n×m` matrix, as `n×1`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (n, m) = self.mat(ix, "row_sum")?;
        let d = self.nodes[ix].value.data();
        let out = (0..n).map(|i| d[i * m..(i + 1) * m].iter().sum()).collect();
        Ok(self.push(Tensor::matrix(n, 1, out)?, Op::RowSum(ix)))
    }

    /// `out[i][j] = x[i][j] − x[i][i]` for a square matrix.
    pub fn sub_row_diag(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (n, m) = self.mat(ix, "sub_row_diag")?;
        dim("sub_row_diag square", n, m)?;
        let d = self.nodes[ix].value.data();
        let mut out = d.to_vec();
        for i in 0..n {
            let diag = d[i * n + i];
            for v in &mut out[i * n..(i + 1) * n] {
                *v -= diag;
            }
        }
        Ok(self.push(Tensor::matrix(n, n, out)?, Op::SubRowDiag(ix)))
    }

    /// Arithmetic mean of scalar nodes, summed in order.
    pub fn mean_of_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let idx = terms.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        if idx.is_empty() {
            return Err(Error::Tape("mean of no terms"));
        }
        let mut total = 0.0;
        for &i in &idx {
            dim("scalar term", 1, self.nodes[i].value.len())?;
            total += self.nodes[i].value.item();
        }
        let m = total / idx.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::MeanScalars(idx)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = *idx.first().ok_or(Error::Tape("empty concatenation"))?;
        let (n, _) = self.mat(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (r, c) = self.mat(i, "concat_cols")?;
            dim("concat_cols rows", n, r)?;
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&i, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::matrix(n, total, out)?, Op::ConcatCols(idx)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let t = Tensor::concat_rows(&refs)?;
        Ok(self.push(t, Op::ConcatRows(idx)))
    }

    /// Scales each row to unit Euclidean norm; rows with norm below
    /// [`NORM_GUARD`] are passed through unchanged.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (n, m) = self.mat(ix, "l2_normalize")?;
        let mut out = self.nodes[ix].value.data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            let nrm = tensor::norm(row);
            if nrm >= NORM_GUARD {
                row.iter_mut().for_each(|v| *v /= nrm);
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::L2NormalizeRows(ix)))
    }

    /// Pairwise squared Euclidean distances between the rows of `a` and `b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (n, k) = self.mat(ia, "sq_dist lhs")?;
        let (m, k2) = self.mat(ib, "sq_dist rhs")?;
        dim("sq_dist feature width", k, k2)?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(tensor::sq_dist(ta.row(i), tb.row(j)));
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::SqDist(ia, ib)))
    }

    /// Elementwise multi-bandwidth Gaussian kernel of squared distances.
    pub fn multi_gaussian(&mut self, sq: Var, sigmas: &[f64]) -> Result<Var> {
        if sigmas.is_empty() {
            return Err(Error::Config("empty bandwidth list".into()));
        }
        let ix = self.idx(sq)?;
        let t = &self.nodes[ix].value;
        let data = t
            .data()
            .iter()
            .map(|&d| kernels::multi_gaussian_of_sq(d, sigmas))
            .collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MultiGaussian(ix, sigmas.to_vec())))
    }

    /// Mean cross-entropy of two-column logits against binary labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let ix = self.idx(logits)?;
        let (n, c) = self.mat(ix, "cross-entropy logits")?;
        dim("cross-entropy classes", 2, c)?;
        dim("cross-entropy labels", n, labels.len())?;
        if n == 0 {
            return Err(Error::Validation("cross-entropy of an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Validation(alloc::format!("label {bad} outside {{0,1}}")));
        }
        let d = self.nodes[ix].value.data();
        let mut total = 0.0;
        for (row, &y) in d.chunks(2).zip(labels) {
            total += log_sum_exp2(row[0], row[1]) - row[y as usize];
        }
        let loss = total / n as f64;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxXent(ix, labels.to_vec())))
    }

    /// Valid 1-D convolution over a `batch×len×emb` sequence followed by ReLU
    /// and max-over-time pooling. `weight` is `(width·emb)×filters`, `bias`
    /// has `filters` entries.
    pub fn conv_max_pool(&mut self, seq: Var, weight: Var, bias: Var, width: usize) -> Result<Var> {
        let (is, iw, ib) = (self.idx(seq)?, self.idx(weight)?, self.idx(bias)?);
        let st = &self.nodes[is].value;
        if st.shape().len() != 3 {
            return Err(Error::Dimension {
                context: "sequence rank",
                expected: 3,
                actual: st.shape().len(),
            });
        }
        let (batch, len, emb) = (st.shape()[0], st.shape()[1], st.shape()[2]);
        if width == 0 {
            return Err(Error::Config("kernel width must be positive".into()));
        }
        if len < width {
            return Err(Error::SequenceTooShort { len, width });
        }
        let (k, filters) = self.mat(iw, "conv weight")?;
        dim("conv weight rows", width * emb, k)?;
        dim("conv bias", filters, self.nodes[ib].value.len())?;
        let (w, b) = (self.nodes[iw].value.data(), self.nodes[ib].value.data());
        let mut out = vec![0.0; batch * filters];
        let mut argmax = vec![usize::MAX; batch * filters];
        let positions = len - width + 1;
        for bi in 0..batch {
            let s = st.row(bi);
            let mut best = vec![f64::NEG_INFINITY; filters];
            let mut best_at = vec![0usize; filters];
            for pos in 0..positions {
                let window = &s[pos * emb..pos * emb + k];
                let conv = tensor::matmul(window, w, 1, k, filters);
                for f in 0..filters {
                    let v = conv[f] + b[f];
                    if v > best[f] {
                        best[f] = v;
                        best_at[f] = pos;
                    }
                }
            }
            for f in 0..filters {
                if best[f] > 0.0 {
                    out[bi * filters + f] = best[f];
                    argmax[bi * filters + f] = best_at[f];
                }
            }
        }
        let t = Tensor::matrix(batch, filters, out)?;
        Ok(self.push(
            t,
            Op::ConvMaxPool {
                input: is,
                weight: iw,
                bias: ib,
                width,
                argmax,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Tape("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; il + 1];
        grads[il] = Some(Tensor::filled(self.nodes[il].value.shape(), 1.0));
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let m = val(*b).shape()[1];
                let (ad, bd) = (val(*a).data(), val(*b).data());
                accumulate(grads, *a, val(*a), |da| {
                    for r in 0..n {
                        for p in 0..k {
                            da[r * k + p] += tensor::dot(&gd[r * m..(r + 1) * m], &bd[p * m..(p + 1) * m]);
                        }
                    }
                });
                accumulate(grads, *b, val(*b), |db| {
                    for r in 0..n {
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                db[p * m + j] += av * gd[r * m + j];
                            }
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (n, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let m = val(*b).shape()[0];
                let (ad, bd) = (val(*a).data(), val(*b).data());
                accumulate(grads, *a, val(*a), |da| {
                    for r in 0..n {
                        for j in 0..m {
                            let gv = gd[r * m + j];
                            for p in 0..k {
                                da[r * k + p] += gv * bd[j * k + p];
                            }
                        }
                    }
                });
                accumulate(grads, *b, val(*b), |db| {
                    for r in 0..n {
                        for j in 0..m {
                            let gv = gd[r * m + j];
                            for p in 0..k {
                                db[j * k + p] += gv * ad[r * k + p];
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                accumulate(grads, *x, val(*x), |dx| add_into(dx, gd));
                let m = val(*b).len();
                accumulate(grads, *b, val(*b), |db| {
                    for row in gd.chunks(m) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, val(*a), |da| add_into(da, gd));
                accumulate(grads, *b, val(*b), |db| add_into(db, gd));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, val(*a), |da| add_into(da, gd));
                accumulate(grads, *b, val(*b), |db| {
                    db.iter_mut().zip(gd).for_each(|(d, &gv)| *d -= gv)
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                accumulate(grads, *a, val(*a), |da| {
                    for ((d, &gv), &bv) in da.iter_mut().zip(gd).zip(bd) {
                        *d += gv * bv;
                    }
                });
                accumulate(grads, *b, val(*b), |db| {
                    for ((d, &gv), &av) in db.iter_mut().zip(gd).zip(ad) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, val(*x), |dx| {
                    dx.iter_mut().zip(gd).for_each(|(d, &gv)| *d += gv * c)
                });
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                accumulate(grads, *x, val(*x), |dx| {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(gd).zip(xd) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let od = node.value.data();
                accumulate(grads, *x, val(*x), |dx| {
                    for ((d, &gv), &ov) in dx.iter_mut().zip(gd).zip(od) {
                        *d += gv * ov;
                    }
                });
            }
            Op::Ln1p(x) => {
                let xd = val(*x).data();
                accumulate(grads, *x, val(*x), |dx| {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(gd).zip(xd) {
                        *d += gv / (1.0 + xv);
                    }
                });
            }
            Op::WeightedSum(x, w) => {
                let gv = gd[0];
                accumulate(grads, *x, val(*x), |dx| {
                    dx.iter_mut().zip(w).for_each(|(d, &wv)| *d += gv * wv)
                });
            }
            Op::Mean(x) => {
                let gv = gd[0] / val(*x).len() as f64;
                accumulate(grads, *x, val(*x), |dx| dx.iter_mut().for_each(|d| *d += gv));
            }
            Op::RowSum(x) => {
                let m = val(*x).shape()[1];
                accumulate(grads, *x, val(*x), |dx| {
                    for (row, &gv) in dx.chunks_mut(m).zip(gd) {
                        row.iter_mut().for_each(|d| *d += gv);
                    }
                });
            }
            Op::SubRowDiag(x) => {
                let n = val(*x).shape()[0];
                accumulate(grads, *x, val(*x), |dx| {
                    for r in 0..n {
                        let grow = &gd[r * n..(r + 1) * n];
                        add_into(&mut dx[r * n..(r + 1) * n], grow);
                        dx[r * n + r] -= grow.iter().sum::<f64>();
                    }
                });
            }
            Op::MeanScalars(parts) => {
                let gv = gd[0] / parts.len() as f64;
                for &p in parts {
                    accumulate(grads, p, val(p), |dp| dp[0] += gv);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    accumulate(grads, p, val(p), |dp| {
                        for (r, row) in dp.chunks_mut(w).enumerate() {
                            add_into(row, &gd[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    accumulate(grads, p, val(p), |dp| add_into(dp, &gd[offset..offset + len]));
                    offset += len;
                }
            }
            Op::L2NormalizeRows(x) => {
                let m = val(*x).shape()[1].max(1);
                let (xd, yd) = (val(*x).data(), node.value.data());
                accumulate(grads, *x, val(*x), |dx| {
                    for r in 0..dx.len() / m {
                        let span = r * m..(r + 1) * m;
                        let nrm = tensor::norm(&xd[span.clone()]);
                        let (grow, yrow) = (&gd[span.clone()], &yd[span.clone()]);
                        if nrm < NORM_GUARD {
                            add_into(&mut dx[span], grow);
                            continue;
                        }
                        let proj = tensor::dot(yrow, grow);
                        for ((d, &gv), &yv) in dx[span].iter_mut().zip(grow).zip(yrow) {
                            *d += (gv - yv * proj) / nrm;
                        }
                    }
                });
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[0];
                accumulate(grads, *a, ta, |da| {
                    for i in 0..n {
                        for j in 0..m {
                            let gv = 2.0 * gd[i * m + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let (ar, br) = (ta.row(i), tb.row(j));
                            for p in 0..k {
                                da[i * k + p] += gv * (ar[p] - br[p]);
                            }
                        }
                    }
                });
                accumulate(grads, *b, tb, |db| {
                    for i in 0..n {
                        for j in 0..m {
                            let gv = 2.0 * gd[i * m + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let (ar, br) = (ta.row(i), tb.row(j));
                            for p in 0..k {
                                db[j * k + p] -= gv * (ar[p] - br[p]);
                            }
                        }
                    }
                });
            }
            Op::MultiGaussian(x, sigmas) => {
                let xd = val(*x).data();
                accumulate(grads, *x, val(*x), |dx| {
                    for ((d, &gv), &sq) in dx.iter_mut().zip(gd).zip(xd) {
                        *d += gv * kernels::multi_gaussian_of_sq_deriv(sq, sigmas);
                    }
                });
            }
            Op::SoftmaxXent(x, labels) => {
                let n = labels.len() as f64;
                let xd = val(*x).data();
                let gv = gd[0] / n;
                accumulate(grads, *x, val(*x), |dx| {
                    for ((drow, row), &y) in dx.chunks_mut(2).zip(xd.chunks(2)).zip(labels) {
                        let lse = log_sum_exp2(row[0], row[1]);
                        for c in 0..2 {
                            let p = libm::exp(row[c] - lse);
                            let target = if c == y as usize { 1.0 } else { 0.0 };
                            drow[c] += gv * (p - target);
                        }
                    }
                });
            }
            Op::ConvMaxPool {
                input,
                weight,
                bias,
                width,
                argmax,
            } => {
                let st = val(*input);
                let emb = st.shape()[2];
                let k = width * emb;
                let filters = val(*bias).len();
                let wd = val(*weight).data();
                accumulate(grads, *weight, val(*weight), |dw| {
                    for (bf, &pos) in argmax.iter().enumerate() {
                        if pos == usize::MAX {
                            continue;
                        }
                        let (bi, f) = (bf / filters, bf % filters);
                        let window = &st.row(bi)[pos * emb..pos * emb + k];
                        for (p, &xv) in window.iter().enumerate() {
                            dw[p * filters + f] += gd[bf] * xv;
                        }
                    }
                });
                accumulate(grads, *bias, val(*bias), |db| {
                    for (bf, &pos) in argmax.iter().enumerate() {
                        if pos != usize::MAX {
                            db[bf % filters] += gd[bf];
                        }
                    }
                });
                accumulate(grads, *input, st, |ds| {
                    let row_len = st.row_len();
                    for (bf, &pos) in argmax.iter().enumerate() {
                        if pos == usize::MAX {
                            continue;
                        }
                        let (bi, f) = (bf / filters, bf % filters);
                        let base = bi * row_len + pos * emb;
                        for p in 0..k {
                            ds[base + p] += gd[bf] * wd[p * filters + f];
                        }
                    }
                });
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], j: usize, like: &Tensor, f: impl FnOnce(&mut [f64])) {
    let slot = grads[j].get_or_insert_with(|| Tensor::zeros(like.shape()));
    f(slot.data_mut());
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = if a > b { a } else { b };
    m + libm::log(libm::exp(a - m) + libm::exp(b - m))
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Adds every parameter gradient into the matching slot of `params`.
    pub fn accumulate_into(&self, tape: &Tape, params: &mut ParamSet) -> Result<()> {
        if tape.id != self.tape {
            return Err(Error::Tape("gradients belong to a different tape"));
        }
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                add_into(params.grad_mut(*id).data_mut(), g.data());
            }
        }
        Ok(())
    }
}

/// Backpropagates `loss` and adds the resulting parameter gradients into
/// `params`. Existing gradient contents are kept, so call
/// [`ParamSet::zero_grad`] between steps.
pub fn compute_gradients(tape: &Tape, loss: Var, params: &mut ParamSet) -> Result<()> {
    let grads = tape.backward(loss)?;
    grads.accumulate_into(tape, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Tensor) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = build(&mut tape, x);
        let g = tape.backward(loss).unwrap();
        let analytic = g.wrt(x).unwrap().clone();
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::new();
                let v = t.leaf(xp);
                let l = build(&mut t, v);
                t.scalar(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() / numeric.abs().max(1.0) < 1e-6,
                "entry {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut params = ParamSet::new();
        let id = params.add("p", sample(2, 3, 1)).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&params, id);
        let loss = tape.weighted_sum(p, vec![1.0; 6]).unwrap();
        compute_gradients(&tape, loss, &mut params).unwrap();
        assert!(params.grad(id).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut params = ParamSet::new();
        let id = params.add("p", sample(1, 4, 2)).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&params, id);
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.weighted_sum(sq, vec![0.5; 4]).unwrap();
        compute_gradients(&tape, loss, &mut params).unwrap();
        for (g, v) in params.grad(id).data().iter().zip(params.value(id).data()) {
            assert!((g - v).abs() < 1e-15);
        }
    }

    #[test]
    fn foreign_loss_is_rejected() {
        let mut a = Tape::new();
        let b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0));
        assert!(matches!(b.backward(x), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut a = Tape::new();
        let x = a.leaf(Tensor::zeros(&[2, 2]));
        assert!(a.backward(x).is_err());
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let w = sample(3, 2, 7);
        fd_check(
            move |t, x| {
                let wv = t.leaf(w.clone());
                let y = t.matmul(x, wv).unwrap();
                let b = t.leaf(Tensor::new(vec![2], vec![0.3, -0.2]).unwrap());
                let y = t.add_bias(y, b).unwrap();
                let y = t.exp(y).unwrap();
                t.mean(y).unwrap()
            },
            sample(4, 3, 3),
        );
    }

    #[test]
    fn matmul_t_and_row_ops_gradients() {
        let other = sample(3, 4, 11);
        fd_check(
            move |t, x| {
                let o = t.leaf(other.clone());
                let s = t.matmul_t(x, o).unwrap();
                let s = t.sub_row_diag(s).unwrap();
                let e = t.exp(s).unwrap();
                let r = t.row_sum(e).unwrap();
                let l = t.ln_1p(r).unwrap();
                t.weighted_sum(l, vec![0.2, 0.5, 0.3]).unwrap()
            },
            sample(3, 4, 5),
        );
    }

    #[test]
    fn normalize_distance_kernel_gradients() {
        let other = sample(2, 3, 13);
        fd_check(
            move |t, x| {
                let n = t.l2_normalize(x).unwrap();
                let o = t.leaf(other.clone());
                let cat = t.concat_rows(&[n, o]).unwrap();
                let d = t.sq_dist(cat, n).unwrap();
                let k = t.multi_gaussian(d, &[0.5, 1.0]).unwrap();
                let sq = t.mul(k, k).unwrap();
                t.mean(sq).unwrap()
            },
            sample(3, 3, 17),
        );
    }

    #[test]
    fn cross_entropy_and_concat_gradients() {
        fd_check(
            |t, x| {
                let r = t.relu(x).unwrap();
                let s = t.scale(x, -0.7).unwrap();
                let c = t.concat_cols(&[r, s]).unwrap();
                let w = t.leaf(sample(4, 2, 23));
                let z = t.matmul(c, w).unwrap();
                t.softmax_cross_entropy(z, &[0, 1, 1]).unwrap()
            },
            sample(3, 2, 19),
        );
    }

    #[test]
    fn conv_max_pool_gradients() {
        let seq = Tensor::new(vec![2, 4, 2], sample(2, 8, 31).into_data()).unwrap();
        fd_check(
            move |t, w| {
                let s = t.leaf(seq.clone());
                let b = t.leaf(Tensor::new(vec![3], vec![0.1, 0.0, -0.1]).unwrap());
                let out = t.conv_max_pool(s, w, b, 2).unwrap();
                let sq = t.mul(out, out).unwrap();
                t.mean(sq).unwrap()
            },
            sample(4, 3, 37),
        );
    }
}
