use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::rng::DropoutKey;
use crate::tensor::{Tensor, TensorError};
use crate::{Real, PROB_CLIP};

/// Work size (multiply-adds) above which matrix kernels fan out over rows.
const PAR_THRESHOLD: usize = 1 << 16;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    MatMul(Var, Var),
    Transpose(Var),
    Gather {
        table: Var,
        ids: Arc<[usize]>,
    },
    SegmentSum {
        values: Var,
        weights: Var,
        segments: Arc<[usize]>,
    },
    SegmentSoftmax {
        scores: Var,
        segments: Arc<[usize]>,
        n_segments: usize,
    },
    Conv2d {
        input: Var,
        filters: Var,
    },
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Dropout {
        input: Var,
        mask: Vec<Real>,
    },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Var, Var),
    Reshape(Var),
    Bce {
        probs: Var,
        targets: Arc<Tensor>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Every op appends one node; `backward` walks the nodes in reverse order
/// exactly once, accumulating gradients into every node that requires them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
    backward_done: bool,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Trailing-dimension broadcasting: equal shapes, or one shape is a suffix of
/// the other (the shorter operand repeats).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    if a == b {
        Ok(a.to_vec())
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(mismatch(op, a, b))
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::InvalidArgument(format!(
            "{op}: expected a 2D tensor, got shape {s:?}"
        ))),
    }
}

fn matmul_kernel(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, out_row): (usize, &mut [Real])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `dst += sign · Σ over repeats of (g ⊙ other)`, where `dst` is a trailing
/// suffix broadcast of `g` and `other` is either as long as `g` or a suffix.
fn reduce_into(dst: &mut [Real], g: &[Real], other: Option<&[Real]>, sign: Real) {
    let n = dst.len().max(1);
    for (c, g_chunk) in g.chunks(n).enumerate() {
        match other {
            None => dst.iter_mut().zip(g_chunk).for_each(|(x, &gv)| *x += sign * gv),
            Some(o) if o.len() == g.len() => {
                let o_chunk = &o[c * n..c * n + g_chunk.len()];
                for ((x, &gv), &ov) in dst.iter_mut().zip(g_chunk).zip(o_chunk) {
                    *x += sign * gv * ov;
                }
            }
            Some(o) => {
                for (k, (x, &gv)) in dst.iter_mut().zip(g_chunk).enumerate() {
                    *x += sign * gv * o[(c * n + k) % o.len()];
                }
            }
        }
    }
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(op, ta.shape(), tb.shape())?;
        let (da, db) = (ta.data(), tb.data());
        let n: usize = shape.iter().product();
        let data = if da.len() == n && db.len() == n {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if da.len() == n {
            da.chunks(db.len().max(1)).flat_map(|c| c.iter().zip(db).map(|(&x, &y)| f(x, y))).collect()
        } else {
            db.chunks(da.len().max(1)).flat_map(|c| da.iter().zip(c).map(|(&x, &y)| f(x, y))).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let data = matmul_kernel(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        let (r, c) = dims2("transpose", t)?;
        let d = t.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), rg))
    }

    /// Copies rows `ids` of a 2D table. Backward scatter-adds, so duplicate
    /// ids accumulate.
    pub fn gather_rows(&mut self, table: Var, ids: impl Into<Arc<[usize]>>) -> Result<Var, TensorError> {
        let ids: Arc<[usize]> = ids.into();
        let t = &self.nodes[table.0].value;
        let (n, d) = dims2("gather_rows", t)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids.iter() {
            if id >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: n,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(value, Op::Gather { table, ids }, rg))
    }

    /// Per-segment weighted sum: `out[s] = Σ_{e : segments[e] = s} weights[e] · values[e]`.
    /// Segments without members produce a zero row.
    pub fn segment_weighted_sum(
        &mut self,
        values: Var,
        weights: Var,
        segments: impl Into<Arc<[usize]>>,
        n_segments: usize,
    ) -> Result<Var, TensorError> {
        let segments: Arc<[usize]> = segments.into();
        let tv = &self.nodes[values.0].value;
        let tw = &self.nodes[weights.0].value;
        let (e, d) = dims2("segment_weighted_sum", tv)?;
        if tw.shape() != [e] || segments.len() != e {
            return Err(mismatch("segment_weighted_sum", tv.shape(), tw.shape()));
        }
        let mut out = vec![0.0; n_segments * d];
        for (idx, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(TensorError::IndexOutOfRange {
                    op: "segment_weighted_sum",
                    index: s,
                    bound: n_segments,
                });
            }
            let w = tw.data()[idx];
            for (o, v) in out[s * d..(s + 1) * d].iter_mut().zip(tv.row(idx)) {
                *o += w * v;
            }
        }
        let rg = self.rg(values) || self.rg(weights);
        let value = Tensor::new(vec![n_segments, d], out)?;
        Ok(self.push(
            value,
            Op::SegmentSum {
                values,
                weights,
                segments,
            },
            rg,
        ))
    }

    /// Softmax of a 1D score vector within each segment, with per-segment max
    /// subtraction.
    pub fn segment_softmax(
        &mut self,
        scores: Var,
        segments: impl Into<Arc<[usize]>>,
        n_segments: usize,
    ) -> Result<Var, TensorError> {
        let segments: Arc<[usize]> = segments.into();
        let t = &self.nodes[scores.0].value;
        if t.ndim() != 1 || t.numel() != segments.len() {
            return Err(mismatch("segment_softmax", t.shape(), &[segments.len()]));
        }
        let s = t.data();
        let mut max = vec![Real::NEG_INFINITY; n_segments];
        for (i, &g) in segments.iter().enumerate() {
            if g >= n_segments {
                return Err(TensorError::IndexOutOfRange {
                    op: "segment_softmax",
                    index: g,
                    bound: n_segments,
                });
            }
            max[g] = max[g].max(s[i]);
        }
        let mut out: Vec<Real> = segments.iter().zip(s).map(|(&g, &x)| (x - max[g]).exp()).collect();
        let mut denom = vec![0.0; n_segments];
        for (&g, &y) in segments.iter().zip(&out) {
            denom[g] += y;
        }
        for (y, &g) in out.iter_mut().zip(segments.iter()) {
            *y /= denom[g];
        }
        let rg = self.rg(scores);
        let value = Tensor::new(vec![segments.len()], out)?;
        Ok(self.push(
            value,
            Op::SegmentSoftmax {
                scores,
                segments,
                n_segments,
            },
            rg,
        ))
    }

    /// Valid 2D cross-correlation, stride 1, no padding.
    /// `input: [B, C_in, H, W]`, `filters: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, filters: Var) -> Result<Var, TensorError> {
        let ti = &self.nodes[input.0].value;
        let tf = &self.nodes[filters.0].value;
        let (&[b, ci, h, w], &[co, ci2, kh, kw]) = (ti.shape(), tf.shape()) else {
            return Err(mismatch("conv2d", ti.shape(), tf.shape()));
        };
        if ci != ci2 || kh != kw {
            return Err(mismatch("conv2d", ti.shape(), tf.shape()));
        }
        if kh > h || kw > w || kh == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let (x, f) = (ti.data(), tf.data());
        let mut out = vec![0.0; b * co * ho * wo];
        let image = |(bi, out_b): (usize, &mut [Real])| {
            for o in 0..co {
                let plane = &mut out_b[o * ho * wo..(o + 1) * ho * wo];
                for c in 0..ci {
                    let xin = &x[(bi * ci + c) * h * w..(bi * ci + c + 1) * h * w];
                    let fk = &f[(o * ci + c) * kh * kw..(o * ci + c + 1) * kh * kw];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let fv = fk[ky * kw + kx];
                            for y in 0..ho {
                                let src = &xin[(y + ky) * w + kx..(y + ky) * w + kx + wo];
                                for (dst, s) in plane[y * wo..(y + 1) * wo].iter_mut().zip(src) {
                                    *dst += fv * s;
                                }
                            }
                        }
                    }
                }
            }
        };
        let chunk = (co * ho * wo).max(1);
        if b * co * ci * ho * wo * kh * kw >= PAR_THRESHOLD {
            out.par_chunks_mut(chunk).enumerate().for_each(image);
        } else {
            out.chunks_mut(chunk).enumerate().for_each(image);
        }
        let rg = self.rg(input) || self.rg(filters);
        let value = Tensor::new(vec![b, co, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { input, filters }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Real::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is zero;
    /// otherwise kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, a: Var, rate: Real, key: DropoutKey, training: bool) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let n = self.nodes[a.0].value.numel();
        let keep = 1.0 / (1.0 - rate);
        let mut rng = key.rng();
        let mask: Vec<Real> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate as f64 { 0.0 } else { keep })
            .collect();
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Dropout { input: a, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.sum() / t.numel().max(1) as Real;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums each row of a 2D tensor: `[n, d] -> [n]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        let (n, d) = dims2("row_sum", t)?;
        let data = (0..n).map(|i| t.data()[i * d..(i + 1) * d].iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n], data)?, Op::RowSum(a), rg))
    }

    /// `[n, p] ‖ [n, q] -> [n, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, p) = dims2("concat_cols", ta)?;
        let (n2, q) = dims2("concat_cols", tb)?;
        if n != n2 {
            return Err(mismatch("concat_cols", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, p + q], data)?, Op::ConcatCols(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.nodes[a.0].value.clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Mean binary cross entropy over all elements, with probabilities clipped
    /// to `[PROB_CLIP, 1 - PROB_CLIP]`. Targets are constants.
    pub fn bce(&mut self, probs: Var, targets: impl Into<Arc<Tensor>>) -> Result<Var, TensorError> {
        let targets: Arc<Tensor> = targets.into();
        let tp = &self.nodes[probs.0].value;
        if tp.shape() != targets.shape() {
            return Err(mismatch("bce", tp.shape(), targets.shape()));
        }
        let n = tp.numel().max(1) as Real;
        let total: Real = tp
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&o, &t)| {
                let o = o.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                t * o.ln() + (1.0 - t) * (1.0 - o).ln()
            })
            .sum();
        let rg = self.rg(probs);
        Ok(self.push(Tensor::scalar(-total / n), Op::Bce { probs, targets }, rg))
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward root with respect to `v`. Nodes that
    /// require gradients but were not reached get zeros; nodes that do not
    /// require gradients get `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !self.backward_done {
            return None;
        }
        let data = match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; node.value.numel()],
        };
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
    }

    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Each accumulation below borrows one buffer at a time through `acc`.
        fn acc<'g>(grads: &'g mut [Option<Vec<Real>>], v: Var, nodes: &[Node]) -> Option<&'g mut Vec<Real>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.numel();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = acc(grads, *a, nodes) {
                    reduce_into(ga, g, None, 1.0);
                }
                if let Some(gb) = acc(grads, *b, nodes) {
                    reduce_into(gb, g, None, sign);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                if let Some(ga) = acc(grads, *a, nodes) {
                    reduce_into(ga, g, Some(db), 1.0);
                }
                if let Some(gb) = acc(grads, *b, nodes) {
                    reduce_into(gb, g, Some(da), 1.0);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc(grads, *a, nodes) {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += c * gv;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let (da, db) = (ta.data(), tb.data());
                if let Some(ga) = acc(grads, *a, nodes) {
                    // dA = dC · Bᵀ, accumulated as rows of Bᵀ scaled by dC.
                    let mut bt = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = db[p * n + j];
                        }
                    }
                    let row = |(r, ga_row): (usize, &mut [Real])| {
                        for (j, &gv) in g[r * n..(r + 1) * n].iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for (x, &bv) in ga_row.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                                *x += gv * bv;
                            }
                        }
                    };
                    if m * k * n >= PAR_THRESHOLD && k > 0 {
                        ga.par_chunks_mut(k).enumerate().for_each(row);
                    } else if k > 0 {
                        ga.chunks_mut(k).enumerate().for_each(row);
                    }
                }
                if let Some(gb) = acc(grads, *b, nodes).filter(|_| n > 0) {
                    // dB = Aᵀ · dC
                    if m * k * n < PAR_THRESHOLD || rayon::current_num_threads() == 1 {
                        for (a_row, g_row) in da.chunks(k.max(1)).zip(g.chunks(n)) {
                            for (&av, gb_row) in a_row.iter().zip(gb.chunks_mut(n)) {
                                if av != 0.0 {
                                    for (x, &gv) in gb_row.iter_mut().zip(g_row) {
                                        *x += av * gv;
                                    }
                                }
                            }
                        }
                        return;
                    }
                    let row = |(p, gb_row): (usize, &mut [Real])| {
                        for r in 0..m {
                            let av = da[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (x, &gv) in gb_row.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *x += av * gv;
                            }
                        }
                    };
                    gb.par_chunks_mut(n).enumerate().for_each(row);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                if let Some(ga) = acc(grads, *a, nodes) {
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = val(*table).shape()[1];
                if let Some(gt) = acc(grads, *table, nodes) {
                    for (row, &id) in ids.iter().enumerate() {
                        for (x, &gv) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]) {
                            *x += gv;
                        }
                    }
                }
            }
            Op::SegmentSum {
                values,
                weights,
                segments,
            } => {
                let tv = val(*values);
                let d = tv.shape()[1];
                let w = val(*weights).data();
                if let Some(gv) = acc(grads, *values, nodes) {
                    for (e, &s) in segments.iter().enumerate() {
                        let we = w[e];
                        for (x, &gg) in gv[e * d..(e + 1) * d].iter_mut().zip(&g[s * d..(s + 1) * d]) {
                            *x += we * gg;
                        }
                    }
                }
                if let Some(gw) = acc(grads, *weights, nodes) {
                    for (e, &s) in segments.iter().enumerate() {
                        gw[e] += dot(tv.row(e), &g[s * d..(s + 1) * d]);
                    }
                }
            }
            Op::SegmentSoftmax {
                scores,
                segments,
                n_segments,
            } => {
                let y = nodes[i].value.data();
                let mut inner = vec![0.0; *n_segments];
                for (e, &s) in segments.iter().enumerate() {
                    inner[s] += y[e] * g[e];
                }
                if let Some(gs) = acc(grads, *scores, nodes) {
                    for (e, &s) in segments.iter().enumerate() {
                        gs[e] += y[e] * (g[e] - inner[s]);
                    }
                }
            }
            Op::Conv2d { input, filters } => {
                let (ti, tf) = (val(*input), val(*filters));
                let [b, ci, h, w] = ti.shape()[..] else { unreachable!() };
                let [co, _, k, _] = tf.shape()[..] else { unreachable!() };
                let (ho, wo) = (h - k + 1, w - k + 1);
                let (x, f) = (ti.data(), tf.data());
                if let Some(gi) = acc(grads, *input, nodes) {
                    for bi in 0..b {
                        for o in 0..co {
                            let gplane = &g[(bi * co + o) * ho * wo..(bi * co + o + 1) * ho * wo];
                            for c in 0..ci {
                                let gin = &mut gi[(bi * ci + c) * h * w..(bi * ci + c + 1) * h * w];
                                let fk = &f[(o * ci + c) * k * k..(o * ci + c + 1) * k * k];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let fv = fk[ky * k + kx];
                                        for y in 0..ho {
                                            let dst = &mut gin[(y + ky) * w + kx..(y + ky) * w + kx + wo];
                                            for (d, gg) in dst.iter_mut().zip(&gplane[y * wo..(y + 1) * wo]) {
                                                *d += fv * gg;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gf) = acc(grads, *filters, nodes) {
                    for bi in 0..b {
                        for o in 0..co {
                            let gplane = &g[(bi * co + o) * ho * wo..(bi * co + o + 1) * ho * wo];
                            for c in 0..ci {
                                let xin = &x[(bi * ci + c) * h * w..(bi * ci + c + 1) * h * w];
                                let gk = &mut gf[(o * ci + c) * k * k..(o * ci + c + 1) * k * k];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let mut s = 0.0;
                                        for y in 0..ho {
                                            s += dot(
                                                &xin[(y + ky) * w + kx..(y + ky) * w + kx + wo],
                                                &gplane[y * wo..(y + 1) * wo],
                                            );
                                        }
                                        gk[ky * k + kx] += s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let y = nodes[i].value.data();
                if let Some(ga) = acc(grads, *a, nodes) {
                    for ((x, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Relu(a) => {
                let xin = val(*a).data();
                if let Some(ga) = acc(grads, *a, nodes) {
                    for ((x, &gv), &xv) in ga.iter_mut().zip(g).zip(xin) {
                        if xv > 0.0 {
                            *x += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = nodes[i].value.data();
                if let Some(ga) = acc(grads, *a, nodes) {
                    for ((x, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(ga) = acc(grads, *input, nodes) {
                    for ((x, &gv), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += gv * m;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(grads, *a, nodes) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = acc(grads, *a, nodes) {
                    let n = ga.len().max(1) as Real;
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::RowSum(a) => {
                let d = val(*a).shape()[1];
                if let Some(ga) = acc(grads, *a, nodes) {
                    for (r, &gv) in g.iter().enumerate() {
                        ga[r * d..(r + 1) * d].iter_mut().for_each(|x| *x += gv);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let p = val(*a).shape()[1];
                let q = val(*b).shape()[1];
                if let Some(ga) = acc(grads, *a, nodes).filter(|_| p > 0) {
                    for (r, row) in ga.chunks_mut(p).enumerate() {
                        for (x, &gv) in row.iter_mut().zip(&g[r * (p + q)..r * (p + q) + p]) {
                            *x += gv;
                        }
                    }
                }
                if let Some(gb) = acc(grads, *b, nodes).filter(|_| q > 0) {
                    for (r, row) in gb.chunks_mut(q).enumerate() {
                        for (x, &gv) in row.iter_mut().zip(&g[r * (p + q) + p..(r + 1) * (p + q)]) {
                            *x += gv;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = acc(grads, *a, nodes) {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                }
            }
            Op::Bce { probs, targets } => {
                let o = val(*probs).data();
                let n = o.len().max(1) as Real;
                if let Some(gp) = acc(grads, *probs, nodes) {
                    for ((x, &ov), &t) in gp.iter_mut().zip(o).zip(targets.data()) {
                        // The clamp has zero derivative outside the clip range.
                        if ov > PROB_CLIP && ov < 1.0 - PROB_CLIP {
                            *x += -g[0] * (t / ov - (1.0 - t) / (1.0 - ov)) / n;
                        }
                    }
                }
            }
        }
    }
}

