//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Nodes are appended to a [`Graph`] in evaluation order, so the node list is
//! already a topological order and [`Graph::backward`] is one reverse sweep.
//! Every value is two-dimensional; vectors are `1 × n` rows.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

pub type Tensor = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Marks an absent source element in a gather index (reads as zero).
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LogSigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    SumRows(Var),
    Gather(Var, Arc<[u32]>),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    L2NormalizeRows(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed in.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.raw_dim()))
    }
}

fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x < 0.0 {
        x - x.exp().ln_1p()
    } else {
        -(-x).exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Same value as `v`, cut from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1×c row");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a (r×c) * col (r×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects an r×1 column");
        let value = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(value, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(log_sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::LogSigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::from_elem((1, 1), s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, `r×c → 1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(value, Op::SumRows(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0.max(1) as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    /// Builds a `rows × cols` tensor whose flat element `i` is the flat
    /// (row-major) element `index[i]` of `a`, or zero for [`GATHER_ZERO`].
    pub fn gather(&mut self, a: Var, index: Arc<[u32]>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let src = self.value(a).as_slice().expect("standard layout");
        let data: Vec<f64> = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] })
            .collect();
        let value = Tensor::from_shape_vec((rows, cols), data).expect("gather shape");
        let ng = self.ng(a);
        self.push(value, Op::Gather(a, index), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let index: Vec<u32> = (0..c)
            .flat_map(|j| (0..r).map(move |i| (i * c + j) as u32))
            .collect();
        self.gather(a, index.into(), c, r)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let n = self.value(a).len();
        assert_eq!(n, rows * cols, "reshape size");
        let index: Vec<u32> = (0..n as u32).collect();
        self.gather(a, index.into(), rows, cols)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let (_, c) = self.shape(a);
        let index: Vec<u32> = (0..c).map(|j| (i * c + j) as u32).collect();
        self.gather(a, index.into(), 1, c)
    }

    /// Columns `start..end` of every row.
    pub fn cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start <= end && end <= c, "column range");
        let width = end - start;
        let index: Vec<u32> = (0..r)
            .flat_map(|i| (start..end).map(move |j| (i * c + j) as u32))
            .collect();
        self.gather(a, index.into(), r, width)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.nrows(), vb.nrows(), "concat_cols row count");
        let value = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).expect("concat");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatCols(a, b), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Scales each row to unit L2 norm; rows with norm below `eps` become
    /// zero rows.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > eps {
                row.mapv_inplace(|x| x / norm);
            } else {
                row.fill(0.0);
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::L2NormalizeRows(a, eps), ng)
    }

    /// Dense layer `x w + b` with `w: in×out` and `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.raw_dim()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let d = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, d);
                    }
                    if self.ng(*b) {
                        let d = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, d);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulCol(a, col) => {
                    if self.ng(*col) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads, *col, d);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*col));
                    }
                }
                Op::Affine(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= sigmoid(-x));
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.dot(&yrow);
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d = y * (*d - dot));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let total = drow.sum();
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, &y| *d -= y.exp() * total);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let s = g[[0, 0]];
                    let d = Tensor::from_elem(self.value(*a).raw_dim(), s);
                    accumulate(&mut grads, *a, d);
                }
                Op::SumRows(a) => {
                    let shape = self.value(*a).raw_dim();
                    let d = g.broadcast(shape).expect("broadcast").to_owned();
                    accumulate(&mut grads, *a, d);
                }
                Op::Gather(a, index) => {
                    let src = self.value(*a);
                    let mut d = Tensor::zeros(src.raw_dim());
                    {
                        let dflat = d.as_slice_mut().expect("standard layout");
                        for (&i, &gv) in index.iter().zip(g.iter()) {
                            if i != GATHER_ZERO {
                                dflat[i as usize] += gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.slice(ndarray::s![.., ..ca]).to_owned());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.slice(ndarray::s![.., ca..]).to_owned());
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.value(p).nrows();
                        if self.ng(p) {
                            let d = g.slice(ndarray::s![offset..offset + r, ..]).to_owned();
                            accumulate(&mut grads, p, d);
                        }
                        offset += r;
                    }
                }
                Op::L2NormalizeRows(a, eps) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = g;
                    for ((mut drow, yrow), xrow) in
                        d.rows_mut().into_iter().zip(y.rows()).zip(x.rows())
                    {
                        let norm = xrow.dot(&xrow).sqrt();
                        if norm > *eps {
                            let dot = drow.dot(&yrow);
                            Zip::from(&mut drow)
                                .and(&yrow)
                                .for_each(|d, &y| *d = (*d - y * dot) / norm);
                        } else {
                            drow.fill(0.0);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot => *slot = Some(d),
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut value = x.clone();
    for mut row in value.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    value
}
