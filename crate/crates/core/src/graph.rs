//! Reverse-mode automatic differentiation over 2D arrays.
//!
//! Every tensor in the pipeline is a row-major matrix: token sequences are
//! (rows = positions, cols = channels), batches are stacked row blocks, and
//! scalars are 1x1. A `Graph` records one forward pass; `backward` walks the
//! tape in reverse and returns gradients for parameter leaves. Training
//! instantiates at `f32`, gradient checks and numeric oracles at `f64`.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Element type the numeric stack is generic over.
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn standard_normal(rng: &mut ChaCha12Rng) -> Self;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal(rng: &mut ChaCha12Rng) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn standard_normal(rng: &mut ChaCha12Rng) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Handle to a node in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// (n x m) + broadcast (1 x m).
    AddRow(usize, usize),
    /// (b*k x m) + per-block row from (b x m); block i covers rows i*k..(i+1)*k.
    AddRowsBlock(usize, usize, usize),
    /// (b*k x m) -> (b x m), mean over each k-row block.
    MeanRowsBlock(usize, usize),
    Matmul(usize, usize),
    /// a . b^T without materializing the transpose.
    MatmulNT(usize, usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Gelu(usize),
    /// Row i of the output is row idx[i] of the source; idx < 0 reads zeros.
    GatherRows(usize, Rc<Vec<i64>>),
    /// out[i, j] = src_flat[idx[i*cols + j]]; idx < 0 reads zero (conv padding).
    GatherFlat { src: usize, idx: Rc<Vec<i64>> },
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SumAll(usize),
    MeanAll(usize),
    /// (n x m) -> (1 x m).
    MeanRows(usize),
}

struct Node<T: Real> {
    val: Array2<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients keyed by the `Var` they belong to. Only nodes reachable from
/// the loss and flagged as needing gradients carry an entry.
pub struct Gradients<T: Real> {
    by_node: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.by_node[v.0].as_ref()
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn val(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].val
    }

    pub fn dim(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].val.dim()
    }

    fn push(&mut self, val: Array2<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            val,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, a: Array2<T>) -> Var {
        self.push(a, Op::Leaf, false)
    }

    /// Trainable leaf; `backward` produces a gradient for it.
    pub fn param(&mut self, a: Array2<T>) -> Var {
        self.push(a, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "add: shape mismatch");
        let v = &self.nodes[a.0].val + &self.nodes[b.0].val;
        let ng = self.needs(&[a.0, b.0]);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].val - &self.nodes[b.0].val;
        let ng = self.needs(&[a.0, b.0]);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].val * &self.nodes[b.0].val;
        let ng = self.needs(&[a.0, b.0]);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let v = self.nodes[a.0].val.mapv(|x| x * cc);
        let ng = self.needs(&[a.0]);
        self.push(v, Op::Scale(a.0, c), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, m) = self.dim(a);
        assert_eq!(self.dim(row), (1, m), "add_row: row shape mismatch");
        let v = &self.nodes[a.0].val + &self.nodes[row.0].val;
        let ng = self.needs(&[a.0, row.0]);
        self.push(v, Op::AddRow(a.0, row.0), ng)
    }

    /// Adds rows[i] to every row of block i. `a` is (b*k x m), `rows` (b x m).
    pub fn add_rows_block(&mut self, a: Var, rows: Var, k: usize) -> Var {
        let (n, m) = self.dim(a);
        let (b, m2) = self.dim(rows);
        assert!(k > 0 && n == b * k && m == m2, "add_rows_block: shape mismatch");
        let mut v = self.nodes[a.0].val.clone();
        for i in 0..b {
            let r = self.nodes[rows.0].val.row(i).to_owned();
            let mut block = v.slice_mut(s![i * k..(i + 1) * k, ..]);
            block += &r;
        }
        let ng = self.needs(&[a.0, rows.0]);
        self.push(v, Op::AddRowsBlock(a.0, rows.0, k), ng)
    }

    /// Mean over each k-row block: (b*k x m) -> (b x m).
    pub fn mean_rows_block(&mut self, a: Var, k: usize) -> Var {
        let (n, m) = self.dim(a);
        assert!(k > 0 && n % k == 0, "mean_rows_block: rows not divisible");
        let b = n / k;
        let inv = T::from_f64(1.0 / k as f64);
        let mut v = Array2::zeros((b, m));
        for i in 0..b {
            let block = self.nodes[a.0].val.slice(s![i * k..(i + 1) * k, ..]);
            let mean = block.sum_axis(Axis(0)).mapv(|x| x * inv);
            v.row_mut(i).assign(&mean);
        }
        let ng = self.needs(&[a.0]);
        self.push(v, Op::MeanRowsBlock(a.0, k), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.dim(a);
        let (br, bc) = self.dim(b);
        assert_eq!(ac, br, "matmul: inner dims {}x{} . {}x{}", ar, ac, br, bc);
        let v = self.nodes[a.0].val.dot(&self.nodes[b.0].val);
        let ng = self.needs(&[a.0, b.0]);
        self.push(v, Op::Matmul(a.0, b.0), ng)
    }

    /// a . b^T.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (_, ac) = self.dim(a);
        let (_, bc) = self.dim(b);
        assert_eq!(ac, bc, "matmul_nt: inner dims mismatch");
        let v = self.nodes[a.0].val.dot(&self.nodes[b.0].val.t());
        let ng = self.needs(&[a.0, b.0]);
        self.push(v, Op::MatmulNT(a.0, b.0), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].val;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|e| (e - mx).exp());
            let sum = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        let ng = self.needs(&[a.0]);
        self.push(v, Op::SoftmaxRows(a.0), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].val;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = row
                .iter()
                .map(|&e| (e - mx).exp())
                .fold(T::zero(), |acc, e| acc + e)
                .ln()
                + mx;
            row.mapv_inplace(|e| e - lse);
        }
        let ng = self.needs(&[a.0]);
        self.push(v, Op::LogSoftmaxRows(a.0), ng)
    }

    /// Per-row normalization over columns with learned gain and shift.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (_, m) = self.dim(x);
        assert_eq!(self.dim(gamma), (1, m), "layer_norm: gamma shape");
        assert_eq!(self.dim(beta), (1, m), "layer_norm: beta shape");
        let xv = &self.nodes[x.0].val;
        let g = &self.nodes[gamma.0].val;
        let b = &self.nodes[beta.0].val;
        let mut v = xv.clone();
        let e = T::from_f64(eps);
        let inv_m = T::from_f64(1.0 / m as f64);
        for mut row in v.rows_mut() {
            let mean = row.sum() * inv_m;
            let var = row
                .iter()
                .map(|&a| (a - mean) * (a - mean))
                .fold(T::zero(), |acc, a| acc + a)
                * inv_m;
            let r = (var + e).sqrt().recip();
            for (j, a) in row.iter_mut().enumerate() {
                *a = (*a - mean) * r * g[[0, j]] + b[[0, j]];
            }
        }
        let ng = self.needs(&[x.0, gamma.0, beta.0]);
        self.push(
            v,
            Op::LayerNormRows {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let v = self.nodes[a.0]
            .val
            .mapv(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let ng = self.needs(&[a.0]);
        self.push(v, Op::Gelu(a.0), ng)
    }

    pub fn gather_rows(&mut self, src: Var, idx: Rc<Vec<i64>>) -> Var {
        let (n, m) = self.dim(src);
        let mut v = Array2::zeros((idx.len(), m));
        for (i, &ix) in idx.iter().enumerate() {
            if ix >= 0 {
                assert!((ix as usize) < n, "gather_rows: index {} out of {}", ix, n);
                v.row_mut(i).assign(&self.nodes[src.0].val.row(ix as usize));
            }
        }
        let ng = self.needs(&[src.0]);
        self.push(v, Op::GatherRows(src.0, idx), ng)
    }

    pub fn gather_flat(&mut self, src: Var, idx: Rc<Vec<i64>>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather_flat: index length");
        let (sn, sm) = self.dim(src);
        let total = sn * sm;
        let sv = self.nodes[src.0].val.as_slice().expect("contiguous");
        let mut v = Array2::zeros((rows, cols));
        {
            let out = v.as_slice_mut().expect("contiguous");
            for (o, &ix) in out.iter_mut().zip(idx.iter()) {
                if ix >= 0 {
                    assert!((ix as usize) < total, "gather_flat: index out of range");
                    *o = sv[ix as usize];
                }
            }
        }
        let ng = self.needs(&[src.0]);
        self.push(v, Op::GatherFlat { src: src.0, idx }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, _) = self.dim(a);
        assert!(start + len <= n, "slice_rows: out of range");
        let v = self.nodes[a.0].val.slice(s![start..start + len, ..]).to_owned();
        let ng = self.needs(&[a.0]);
        self.push(v, Op::SliceRows(a.0, start, len), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (_, m) = self.dim(a);
        assert!(start + len <= m, "slice_cols: out of range");
        let v = self.nodes[a.0].val.slice(s![.., start..start + len]).to_owned();
        let ng = self.needs(&[a.0]);
        self.push(v, Op::SliceCols(a.0, start, len), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty");
        let m = self.dim(parts[0]).1;
        let n: usize = parts.iter().map(|&p| self.dim(p).0).sum();
        let mut v = Array2::zeros((n, m));
        let mut at = 0;
        for &p in parts {
            let (pn, pm) = self.dim(p);
            assert_eq!(pm, m, "concat_rows: column mismatch");
            v.slice_mut(s![at..at + pn, ..]).assign(&self.nodes[p.0].val);
            at += pn;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&ids);
        self.push(v, Op::ConcatRows(ids), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: empty");
        let n = self.dim(parts[0]).0;
        let m: usize = parts.iter().map(|&p| self.dim(p).1).sum();
        let mut v = Array2::zeros((n, m));
        let mut at = 0;
        for &p in parts {
            let (pn, pm) = self.dim(p);
            assert_eq!(pn, n, "concat_cols: row mismatch");
            v.slice_mut(s![.., at..at + pm]).assign(&self.nodes[p.0].val);
            at += pm;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&ids);
        self.push(v, Op::ConcatCols(ids), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].val.sum());
        let ng = self.needs(&[a.0]);
        self.push(v, Op::SumAll(a.0), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let (n, m) = self.dim(a);
        let inv = T::from_f64(1.0 / (n * m) as f64);
        let v = Array2::from_elem((1, 1), self.nodes[a.0].val.sum() * inv);
        let ng = self.needs(&[a.0]);
        self.push(v, Op::MeanAll(a.0), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, _) = self.dim(a);
        let inv = T::from_f64(1.0 / n as f64);
        let v = self
            .nodes[a.0]
            .val
            .sum_axis(Axis(0))
            .mapv(|x| x * inv)
            .insert_axis(Axis(0));
        let ng = self.needs(&[a.0]);
        self.push(v, Op::MeanRows(a.0), ng)
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        assert_eq!(self.dim(v), (1, 1), "scalar: node is not 1x1");
        self.nodes[v.0].val[[0, 0]]
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.dim(loss), (1, 1), "backward: loss must be 1x1");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[*b].val;
                    let db = &g * &self.nodes[*a].val;
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    let cc = T::from_f64(*c);
                    self.accum(&mut grads, *a, g.mapv(|x| x * cc));
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(&mut grads, *a, g);
                    self.accum(&mut grads, *row, dr);
                }
                Op::AddRowsBlock(a, rows, k) => {
                    let b = self.dim(Var(*rows)).0;
                    let m = self.dim(Var(*rows)).1;
                    let mut dr = Array2::zeros((b, m));
                    for bi in 0..b {
                        let block = g.slice(s![bi * k..(bi + 1) * k, ..]);
                        dr.row_mut(bi).assign(&block.sum_axis(Axis(0)));
                    }
                    self.accum(&mut grads, *a, g);
                    self.accum(&mut grads, *rows, dr);
                }
                Op::MeanRowsBlock(a, k) => {
                    let (n, m) = self.dim(Var(*a));
                    let inv = T::from_f64(1.0 / *k as f64);
                    let mut da = Array2::zeros((n, m));
                    for bi in 0..n / k {
                        let row = g.row(bi).mapv(|x| x * inv);
                        for r in bi * k..(bi + 1) * k {
                            da.row_mut(r).assign(&row);
                        }
                    }
                    self.accum(&mut grads, *a, da);
                }
                Op::Matmul(a, b) => {
                    let da = g.dot(&self.nodes[*b].val.t());
                    let db = self.nodes[*a].val.t().dot(&g);
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::MatmulNT(a, b) => {
                    let da = g.dot(&self.nodes[*b].val);
                    let db = g.t().dot(&self.nodes[*a].val);
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].val;
                    let mut dx = &g * y;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.sum();
                        for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                            *d = *d - dot * yv;
                        }
                    }
                    self.accum(&mut grads, *a, dx);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[i].val;
                    let mut dx = g.clone();
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let gsum = drow.sum();
                        for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                            *d = *d - gsum * yv.exp();
                        }
                    }
                    self.accum(&mut grads, *a, dx);
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let xv = &self.nodes[*x].val;
                    let gm = &self.nodes[*gamma].val;
                    let (n, m) = xv.dim();
                    let inv_m = T::from_f64(1.0 / m as f64);
                    let e = T::from_f64(*eps);
                    let mut dx = Array2::zeros((n, m));
                    let mut dgamma = Array2::zeros((1, m));
                    let mut dbeta = Array2::zeros((1, m));
                    for r in 0..n {
                        let row = xv.row(r);
                        let grow = g.row(r);
                        let mean = row.sum() * inv_m;
                        let var = row
                            .iter()
                            .map(|&a| (a - mean) * (a - mean))
                            .fold(T::zero(), |acc, a| acc + a)
                            * inv_m;
                        let rstd = (var + e).sqrt().recip();
                        // dxhat, plus gamma/beta grads in the same sweep
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        let mut dxhat = vec![T::zero(); m];
                        let mut xhat = vec![T::zero(); m];
                        for j in 0..m {
                            let xh = (row[j] - mean) * rstd;
                            let dh = grow[j] * gm[[0, j]];
                            xhat[j] = xh;
                            dxhat[j] = dh;
                            mean_dxhat = mean_dxhat + dh;
                            mean_dxhat_xhat = mean_dxhat_xhat + dh * xh;
                            dgamma[[0, j]] = dgamma[[0, j]] + grow[j] * xh;
                            dbeta[[0, j]] = dbeta[[0, j]] + grow[j];
                        }
                        mean_dxhat = mean_dxhat * inv_m;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_m;
                        for j in 0..m {
                            dx[[r, j]] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    self.accum(&mut grads, *x, dx);
                    self.accum(&mut grads, *gamma, dgamma);
                    self.accum(&mut grads, *beta, dbeta);
                }
                Op::Gelu(a) => {
                    let c = T::from_f64(GELU_C);
                    let k = T::from_f64(GELU_A);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let xv = &self.nodes[*a].val;
                    let mut dx = g.clone();
                    for (d, &x) in dx.iter_mut().zip(xv.iter()) {
                        let u = c * (x + k * x * x * x);
                        let t = u.tanh();
                        let du = c * (T::one() + three * k * x * x);
                        let gp = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                        *d = *d * gp;
                    }
                    self.accum(&mut grads, *a, dx);
                }
                Op::GatherRows(src, idx) => {
                    let (n, m) = self.dim(Var(*src));
                    let mut ds = Array2::zeros((n, m));
                    for (r, &ix) in idx.iter().enumerate() {
                        if ix >= 0 {
                            let mut dst = ds.row_mut(ix as usize);
                            dst += &g.row(r);
                        }
                    }
                    self.accum(&mut grads, *src, ds);
                }
                Op::GatherFlat { src, idx, .. } => {
                    let (sn, sm) = self.dim(Var(*src));
                    let mut ds = Array2::zeros((sn, sm));
                    {
                        let dsl = ds.as_slice_mut().expect("contiguous");
                        let gsl = g.as_slice().expect("contiguous");
                        for (&ix, &gv) in idx.iter().zip(gsl.iter()) {
                            if ix >= 0 {
                                dsl[ix as usize] = dsl[ix as usize] + gv;
                            }
                        }
                    }
                    self.accum(&mut grads, *src, ds);
                }
                Op::SliceRows(a, start, len) => {
                    let (n, m) = self.dim(Var(*a));
                    let mut da = Array2::zeros((n, m));
                    da.slice_mut(s![*start..*start + *len, ..]).assign(&g);
                    self.accum(&mut grads, *a, da);
                }
                Op::SliceCols(a, start, len) => {
                    let (n, m) = self.dim(Var(*a));
                    let mut da = Array2::zeros((n, m));
                    da.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    self.accum(&mut grads, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let pn = self.dim(Var(p)).0;
                        let gp = g.slice(s![at..at + pn, ..]).to_owned();
                        self.accum(&mut grads, p, gp);
                        at += pn;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let pm = self.dim(Var(p)).1;
                        let gp = g.slice(s![.., at..at + pm]).to_owned();
                        self.accum(&mut grads, p, gp);
                        at += pm;
                    }
                }
                Op::SumAll(a) => {
                    let (n, m) = self.dim(Var(*a));
                    let gv = g[[0, 0]];
                    self.accum(&mut grads, *a, Array2::from_elem((n, m), gv));
                }
                Op::MeanAll(a) => {
                    let (n, m) = self.dim(Var(*a));
                    let gv = g[[0, 0]] * T::from_f64(1.0 / (n * m) as f64);
                    self.accum(&mut grads, *a, Array2::from_elem((n, m), gv));
                }
                Op::MeanRows(a) => {
                    let (n, m) = self.dim(Var(*a));
                    let inv = T::from_f64(1.0 / n as f64);
                    let row = g.row(0).mapv(|x| x * inv);
                    let mut da = Array2::zeros((n, m));
                    for r in 0..n {
                        da.row_mut(r).assign(&row);
                    }
                    self.accum(&mut grads, *a, da);
                }
            }
        }
        Gradients { by_node: grads }
    }

    fn accum(&self, grads: &mut [Option<Array2<T>>], id: usize, delta: Array2<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => *existing += &delta,
            slot => *slot = Some(delta),
        }
    }
}
