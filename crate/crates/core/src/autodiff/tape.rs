//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records a forward computation as a list of nodes, each holding its
//! value. [`Tape::backward`] walks the list in reverse and accumulates the
//! gradient of a scalar node with respect to every parameter leaf into a flat
//! vector laid out like [`NetworkParams::values`].
//!
//! Rows usually index set elements. Ragged sets (several groups of different
//! sizes stacked into one matrix) are described by [`Segments`], which drive the
//! pooling and broadcast primitives.

use std::cell::RefCell;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::params::{Activation, NetworkParams};
use crate::{Error, Result};

/// Recycled buffers. Forward and backward passes allocate many large,
/// short-lived matrices; reusing them avoids repeated page faults.
mod pool {
    use super::RefCell;

    const MAX_BUFFERS: usize = 256;

    thread_local! {
        static FREE: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
    }

    /// An empty vector with capacity for at least `n` values.
    pub(super) fn take(n: usize) -> Vec<f64> {
        FREE.with(|f| {
            let mut free = f.borrow_mut();
            let best = free
                .iter()
                .enumerate()
                .filter(|(_, v)| v.capacity() >= n)
                .min_by_key(|(_, v)| v.capacity())
                .map(|(i, _)| i);
            match best {
                Some(i) => {
                    let mut v = free.swap_remove(i);
                    v.clear();
                    v
                }
                None => Vec::with_capacity(n),
            }
        })
    }

    pub(super) fn zeroed(n: usize) -> Vec<f64> {
        let mut v = take(n);
        v.resize(n, 0.0);
        v
    }

    pub(super) fn give(v: Vec<f64>) {
        if v.capacity() < 1024 {
            return;
        }
        FREE.with(|f| {
            let mut free = f.borrow_mut();
            if free.len() >= MAX_BUFFERS {
                if let Some((i, _)) = free.iter().enumerate().min_by_key(|(_, v)| v.capacity()) {
                    free.swap_remove(i);
                }
            }
            free.push(v);
        })
    }
}

fn map_into(src: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut v = pool::take(src.len());
    v.extend(src.iter().map(|&x| f(x)));
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: pool::zeroed(rows * cols),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    /// Stacks equally sized vectors as rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("rows of differing length"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn add_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Sum,
    Mean,
}

/// Partition of matrix rows into consecutive segments, with optional per-row
/// weights (a 0/1 observation mask in practice).
#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    offsets: Vec<usize>,
    weights: Option<Vec<f64>>,
    totals: Vec<f64>,
}

impl Segments {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        Self::build(sizes, None)
    }

    pub fn with_weights(sizes: &[usize], weights: Vec<f64>) -> Result<Self> {
        Self::build(sizes, Some(weights))
    }

    fn build(sizes: &[usize], weights: Option<Vec<f64>>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::shape("empty set"));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for &s in sizes {
            if s == 0 {
                return Err(Error::shape("empty set"));
            }
            offsets.push(offsets.last().unwrap() + s);
        }
        let rows = *offsets.last().unwrap();
        let totals = match &weights {
            Some(w) => {
                if w.len() != rows {
                    return Err(Error::shape(format!("{} row weights for {rows} rows", w.len())));
                }
                let totals: Vec<f64> = offsets.windows(2).map(|o| w[o[0]..o[1]].iter().sum()).collect();
                if let Some(s) = totals.iter().position(|&t| t <= 0.0) {
                    return Err(Error::shape(format!("segment {s} has no observed rows")));
                }
                totals
            }
            None => sizes.iter().map(|&s| s as f64).collect(),
        };
        Ok(Self {
            offsets,
            weights,
            totals,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    #[inline]
    fn weight(&self, r: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[r])
    }

    fn scale(&self, s: usize, mode: Pooling) -> f64 {
        match mode {
            Pooling::Sum => 1.0,
            Pooling::Mean => 1.0 / self.totals[s],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param { offset: usize },
    Affine { x: Var, w: Var, b: Var, relu: bool },
    Relu { x: Var },
    Pool { x: Var, seg: Arc<Segments>, mode: Pooling },
    Broadcast { x: Var, seg: Arc<Segments> },
    Concat { a: Var, b: Var },
    Softmax { x: Var },
    Log { x: Var, floor: f64 },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    WeightedSum { x: Var, weights: Matrix },
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 3] {
        match *self {
            Op::Input | Op::Param { .. } => [None; 3],
            Op::Affine { x, w, b, .. } => [Some(x), Some(w), Some(b)],
            Op::Relu { x }
            | Op::Pool { x, .. }
            | Op::Broadcast { x, .. }
            | Op::Softmax { x }
            | Op::Log { x, .. }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::WeightedSum { x, .. } => [Some(x), None, None],
            Op::Concat { a, b } | Op::Add { a, b } | Op::Mul { a, b } => [Some(a), Some(b), None],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::Relu { .. } => "relu",
            Op::Pool { .. } => "pool",
            Op::Broadcast { .. } => "broadcast",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::Log { .. } => "log",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
    /// Whether any parameter leaf feeds into this node.
    needs_grad: bool,
}

/// Branch-free finiteness test: `v * 0` is NaN exactly when `v` is not finite.
fn all_finite(data: &[f64]) -> bool {
    let mut acc = [0.0f64; 8];
    let chunks = data.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] += c[i] * 0.0;
        }
    }
    let tail: f64 = rest.iter().map(|v| v * 0.0).sum();
    (acc.iter().sum::<f64>() + tail) == 0.0
}

/// `c = a * b` (+ `c` when `accumulate`) for row-major operands, with optional
/// transposition expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe in-bounds row-major views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub struct Tape<'p> {
    params: &'p NetworkParams,
    nodes: Vec<Node>,
    layer_vars: Vec<Option<(Var, Var)>>,
}

impl Drop for Tape<'_> {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            pool::give(node.value.data);
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p NetworkParams) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            layer_vars: vec![None; params.layers().len()],
        }
    }

    pub fn params(&self) -> &'p NetworkParams {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Result<Var> {
        let id = self.nodes.len();
        if !all_finite(&value.data) {
            pool::give(value.data);
            return Err(Error::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        let needs_grad = op.inputs().iter().flatten().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(id))
    }

    pub fn input(&mut self, m: Matrix) -> Result<Var> {
        self.push(Op::Input, m)
    }

    fn param_leaf(&mut self, offset: usize, rows: usize, cols: usize) -> Var {
        let mut data = pool::take(rows * cols);
        data.extend_from_slice(&self.params.values()[offset..offset + rows * cols]);
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Param { offset },
            value: Matrix { rows, cols, data },
            needs_grad: true,
        });
        Var(id)
    }

    /// Weight (`out x in`) and bias (`1 x out`) leaves of a layer, created once per tape.
    pub fn layer_params(&mut self, layer: usize) -> (Var, Var) {
        if let Some(v) = self.layer_vars[layer] {
            return v;
        }
        let spec = &self.params.layers()[layer];
        let (out_dim, in_dim) = (spec.out_dim, spec.in_dim);
        let w = self.param_leaf(self.params.weight_range(layer).start, out_dim, in_dim);
        let b = self.param_leaf(self.params.bias_range(layer).start, 1, out_dim);
        self.layer_vars[layer] = Some((w, b));
        (w, b)
    }

    /// The whole parameter vector as one `1 x total_count` leaf.
    pub fn all_params(&mut self) -> Var {
        self.param_leaf(0, 1, self.params.total_count())
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.affine_impl(x, w, b, false)
    }

    /// `relu(x W^T + b)` as a single node.
    pub fn affine_relu(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.affine_impl(x, w, b, true)
    }

    fn affine_impl(&mut self, x: Var, w: Var, b: Var, relu: bool) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols != wv.cols || bv.rows != 1 || bv.cols != wv.rows {
            return Err(Error::shape(format!(
                "affine: input {}x{}, weight {}x{}, bias {}x{}",
                xv.rows, xv.cols, wv.rows, wv.cols, bv.rows, bv.cols
            )));
        }
        let (n, k, m) = (xv.rows, xv.cols, wv.rows);
        let mut data = pool::take(n * m);
        for _ in 0..n {
            data.extend_from_slice(&bv.data);
        }
        let mut out = Matrix { rows: n, cols: m, data };
        gemm(n, k, m, &xv.data, false, &wv.data, true, &mut out.data, true);
        if relu {
            out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        self.push(Op::Affine { x, w, b, relu }, out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = map_into(&xv.data, |v| v.max(0.0));
        let out = Matrix {
            rows: xv.rows,
            cols: xv.cols,
            data,
        };
        self.push(Op::Relu { x }, out)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        match act {
            Activation::Linear => Ok(x),
            Activation::Relu => self.relu(x),
        }
    }

    /// Applies one manifest layer (affine map then its activation).
    pub fn dense(&mut self, layer: usize, x: Var) -> Result<Var> {
        let (w, b) = self.layer_params(layer);
        match self.params.layers()[layer].activation {
            Activation::Linear => self.affine(x, w, b),
            Activation::Relu => self.affine_relu(x, w, b),
        }
    }

    pub fn mlp(&mut self, layers: std::ops::Range<usize>, mut x: Var) -> Result<Var> {
        for li in layers {
            x = self.dense(li, x)?;
        }
        Ok(x)
    }

    pub fn block(&mut self, name: &str, x: Var) -> Result<Var> {
        let layers = self.params.block(name)?;
        self.mlp(layers, x)
    }

    /// Per-segment (weighted) sum or mean of rows: `rows x c` to `segments x c`.
    pub fn pool(&mut self, x: Var, seg: &Arc<Segments>, mode: Pooling) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows != seg.rows() {
            return Err(Error::shape(format!(
                "pool: {} rows but segments cover {}",
                xv.rows,
                seg.rows()
            )));
        }
        let c = xv.cols;
        let mut out = Matrix::zeros(seg.len(), c);
        for s in 0..seg.len() {
            let dst = &mut out.data[s * c..(s + 1) * c];
            for r in seg.range(s) {
                let w = seg.weight(r);
                if w == 0.0 {
                    continue;
                }
                for (d, v) in dst.iter_mut().zip(&xv.data[r * c..(r + 1) * c]) {
                    *d += w * v;
                }
            }
            let scale = seg.scale(s, mode);
            if scale != 1.0 {
                dst.iter_mut().for_each(|d| *d *= scale);
            }
        }
        self.push(
            Op::Pool {
                x,
                seg: Arc::clone(seg),
                mode,
            },
            out,
        )
    }

    /// Repeats segment row `s` for every row the segment covers: `segments x c` to `rows x c`.
    pub fn broadcast(&mut self, x: Var, seg: &Arc<Segments>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows != seg.len() {
            return Err(Error::shape(format!(
                "broadcast: {} rows for {} segments",
                xv.rows,
                seg.len()
            )));
        }
        let c = xv.cols;
        let mut data = pool::take(seg.rows() * c);
        for s in 0..seg.len() {
            let src = &xv.data[s * c..(s + 1) * c];
            for _ in seg.range(s) {
                data.extend_from_slice(src);
            }
        }
        let out = Matrix {
            rows: seg.rows(),
            cols: c,
            data,
        };
        self.push(
            Op::Broadcast {
                x,
                seg: Arc::clone(seg),
            },
            out,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows != bv.rows {
            return Err(Error::shape("concat: row counts differ"));
        }
        let cols = av.cols + bv.cols;
        let mut data = pool::take(av.rows * cols);
        for r in 0..av.rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Matrix {
            rows: av.rows,
            cols,
            data,
        };
        self.push(Op::Concat { a, b }, out)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(Op::Softmax { x }, out)
    }

    /// Elementwise `ln(max(x, floor))`.
    pub fn log(&mut self, x: Var, floor: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = map_into(&xv.data, |v| v.max(floor).ln());
        let out = Matrix {
            rows: xv.rows,
            cols: xv.cols,
            data,
        };
        self.push(Op::Log { x, floor }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape("add: shapes differ"));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(Op::Add { a, b }, out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape("mul: shapes differ"));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Matrix {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        self.push(Op::Mul { a, b }, out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = map_into(&xv.data, |v| v * c);
        let out = Matrix {
            rows: xv.rows,
            cols: xv.cols,
            data,
        };
        self.push(Op::Scale { x, c }, out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data.iter().sum();
        self.push(Op::Sum { x }, Matrix::scalar(total))
    }

    /// `sum_ij weights_ij * x_ij` for a constant weight matrix.
    pub fn weighted_sum(&mut self, x: Var, weights: Matrix) -> Result<Var> {
        let xv = self.value(x);
        if !xv.same_shape(&weights) {
            return Err(Error::shape("weighted_sum: shapes differ"));
        }
        let total = xv.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum();
        self.push(Op::WeightedSum { x, weights }, Matrix::scalar(total))
    }

    /// Gradient of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Vec<f64>> {
        let lv = self.value(loss);
        if lv.rows != 1 || lv.cols != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = vec![0.0; self.params.total_count()];

        for id in (0..=loss.0).rev() {
            let Some(mut dy_owned) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                pool::give(dy_owned.data);
                continue;
            }
            let lower = &mut grads[..id];
            let dy = &dy_owned;
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (g, d) in out[*offset..*offset + dy.data.len()].iter_mut().zip(&dy.data) {
                        *g += d;
                    }
                }
                Op::Affine { x, w, b, relu } => {
                    if *relu {
                        for (d, y) in dy_owned.data.iter_mut().zip(&node.value.data) {
                            if *y <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    let dy = &dy_owned;
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, k, m) = (xv.rows, xv.cols, wv.rows);
                    if self.nodes[x.0].needs_grad {
                        gemm(
                            n,
                            m,
                            k,
                            &dy.data,
                            false,
                            &wv.data,
                            false,
                            &mut grad_slot(&self.nodes, lower, *x).data,
                            true,
                        );
                    }
                    gemm(
                        m,
                        n,
                        k,
                        &dy.data,
                        true,
                        &xv.data,
                        false,
                        &mut grad_slot(&self.nodes, lower, *w).data,
                        true,
                    );
                    let db = grad_slot(&self.nodes, lower, *b);
                    for r in 0..n {
                        for (g, d) in db.data.iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                }
                Op::Relu { x } => {
                    let dx = grad_slot(&self.nodes, lower, *x);
                    for ((g, d), y) in dx.data.iter_mut().zip(&dy.data).zip(&node.value.data) {
                        if *y > 0.0 {
                            *g += d;
                        }
                    }
                }
                Op::Pool { x, seg, mode } => {
                    let c = dy.cols;
                    let dx = grad_slot(&self.nodes, lower, *x);
                    for s in 0..seg.len() {
                        let scale = seg.scale(s, *mode);
                        let src = &dy.data[s * c..(s + 1) * c];
                        for r in seg.range(s) {
                            let w = seg.weight(r) * scale;
                            if w == 0.0 {
                                continue;
                            }
                            for (g, d) in dx.data[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *g += w * d;
                            }
                        }
                    }
                }
                Op::Broadcast { x, seg } => {
                    let c = dy.cols;
                    let dx = grad_slot(&self.nodes, lower, *x);
                    for s in 0..seg.len() {
                        let dst = &mut dx.data[s * c..(s + 1) * c];
                        for r in seg.range(s) {
                            for (g, d) in dst.iter_mut().zip(&dy.data[r * c..(r + 1) * c]) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let ac = self.value(*a).cols;
                    {
                        let da = grad_slot(&self.nodes, lower, *a);
                        for r in 0..dy.rows {
                            for (g, d) in da.row_mut(r).iter_mut().zip(&dy.row(r)[..ac]) {
                                *g += d;
                            }
                        }
                    }
                    let db = grad_slot(&self.nodes, lower, *b);
                    for r in 0..dy.rows {
                        for (g, d) in db.row_mut(r).iter_mut().zip(&dy.row(r)[ac..]) {
                            *g += d;
                        }
                    }
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let dx = grad_slot(&self.nodes, lower, *x);
                    for r in 0..y.rows {
                        let (yr, dyr) = (y.row(r), dy.row(r));
                        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                        for ((g, yi), di) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
                            *g += yi * (di - dot);
                        }
                    }
                }
                Op::Log { x, floor } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = grad_slot(&self.nodes, lower, *x);
                    for ((g, d), v) in dx.data.iter_mut().zip(&dy.data).zip(&xv.data) {
                        if *v > *floor {
                            *g += d / v;
                        }
                    }
                }
                Op::Add { a, b } => {
                    grad_slot(&self.nodes, lower, *a).add_assign(dy);
                    grad_slot(&self.nodes, lower, *b).add_assign(dy);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    {
                        let da = grad_slot(&self.nodes, lower, *a);
                        for ((g, d), o) in da.data.iter_mut().zip(&dy.data).zip(&bv.data) {
                            *g += d * o;
                        }
                    }
                    let db = grad_slot(&self.nodes, lower, *b);
                    for ((g, d), o) in db.data.iter_mut().zip(&dy.data).zip(&av.data) {
                        *g += d * o;
                    }
                }
                Op::Scale { x, c } => {
                    let dx = grad_slot(&self.nodes, lower, *x);
                    for (g, d) in dx.data.iter_mut().zip(&dy.data) {
                        *g += c * d;
                    }
                }
                Op::Sum { x } => {
                    let d = dy.data[0];
                    grad_slot(&self.nodes, lower, *x).data.iter_mut().for_each(|g| *g += d);
                }
                Op::WeightedSum { x, weights } => {
                    let d = dy.data[0];
                    let dx = grad_slot(&self.nodes, lower, *x);
                    for (g, w) in dx.data.iter_mut().zip(&weights.data) {
                        *g += d * w;
                    }
                }
            }
            pool::give(dy_owned.data);
        }
        for g in grads.into_iter().flatten() {
            pool::give(g.data);
        }
        if let Some(i) = out.iter().position(|g| !g.is_finite()) {
            return Err(Error::domain(format!("gradient entry {i} is not finite")));
        }
        Ok(out)
    }
}

fn grad_slot<'a>(nodes: &[Node], lower: &'a mut [Option<Matrix>], v: Var) -> &'a mut Matrix {
    let m = &nodes[v.0].value;
    lower[v.0].get_or_insert_with(|| Matrix::zeros(m.rows, m.cols))
}

/// Evaluates `loss` on a fresh tape and returns its value with the gradient
/// with respect to every entry of `params`.
pub fn grad<F>(params: &NetworkParams, loss: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let l = loss(&mut tape)?;
    let value = tape.value(l).data[0];
    let g = tape.backward(l)?;
    Ok((value, g))
}
