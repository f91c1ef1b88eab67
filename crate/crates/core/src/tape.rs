//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every intermediate [`Matrix`] together with the
//! operation that produced it. [`Tape::backward`] walks the record in
//! reverse and accumulates vector-Jacobian products into a [`Gradients`]
//! table indexed by [`Var`].
//!
//! The op set is exactly what the encoder/decoder pipeline needs; block ops
//! treat a tall matrix as `n_blocks` stacked per-node sub-matrices so the
//! per-node decoder runs as a handful of tape nodes instead of one per node.

use crate::matrix::{matmul_into, matmul_nt_into, matmul_tn_into, Matrix};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

/// Compressed sparse row matrix used as a constant operand.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(col, value)` lists.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for &(c, v) in row {
                assert!(c < cols, "column index out of range");
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self { rows: rows.len(), cols, row_ptr, col_idx, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    pub fn matmul_dense(&self, x: &Matrix) -> Matrix {
        assert_eq!(self.cols, x.rows());
        let d = x.cols();
        let mut out = Matrix::zeros(self.rows, d);
        for r in 0..self.rows {
            let dst = out.row_mut(r);
            for (c, v) in self.row_entries(r) {
                for (o, &xv) in dst.iter_mut().zip(x.row(c)) {
                    *o += v * xv;
                }
            }
        }
        out
    }

    fn transpose_matmul_dense(&self, y: &Matrix) -> Matrix {
        let d = y.cols();
        let mut out = Matrix::zeros(self.cols, d);
        for r in 0..self.rows {
            let src = y.row(r);
            for (c, v) in self.row_entries(r) {
                for (o, &yv) in out.row_mut(c).iter_mut().zip(src) {
                    *o += v * yv;
                }
            }
        }
        out
    }
}

/// Per-row bookkeeping of [`Tape::posterior_normalize`].
#[derive(Debug, Clone)]
struct NormalizedRow {
    norm: f64,
    from_fallback: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    MulRowBroadcast(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    RowNormalize(Var, Vec<f64>),
    PosteriorNormalize { raw: Var, fallback: Var, rows: Vec<NormalizedRow> },
    MaskMul(Var, Arc<Matrix>),
    SpMm(Arc<SparseMatrix>, Var),
    GatherRows(Var, Arc<Vec<usize>>),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Var, Var),
    LeftBlocks { left: Var, x: Var, blocks: usize },
    LeftBlocksConst { left: Arc<Matrix>, x: Var, blocks: usize },
    BlockMatMulNt { a: Var, b: Var, blocks: usize },
    BlockMatMul { a: Var, b: Var, blocks: usize },
    SoftmaxRows(Var),
    BlockMeanRows(Var, usize),
    WeightedSum { coeffs: Var, items: Vec<Var> },
    MaskedAbsSum { pred: Var, target: Arc<Matrix>, mask: Arc<Matrix> },
    OffDiagProduct { z: Var, h: Var, zth: Matrix },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Error raised by an operation whose forward value is undefined.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("row {row} has zero norm in both the primary and fallback inputs")]
pub struct DegenerateRow {
    pub row: usize,
}

/// Norm under which a row counts as zero for normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Leaves are where gradients are read out.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1×c` row vector to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), self.value(x).cols());
        let mut v = self.value(x).clone();
        let bias_row = b.row(0).to_vec();
        for r in 0..v.rows() {
            for (o, bv) in v.row_mut(r).iter_mut().zip(&bias_row) {
                *o += bv;
            }
        }
        self.push(v, Op::AddRowBias(x, bias))
    }

    /// Multiplies every row of `x` elementwise by the `1×c` row `w`.
    pub fn mul_row_broadcast(&mut self, x: Var, w: Var) -> Var {
        let wv = self.value(w).row(0).to_vec();
        let mut v = self.value(x).clone();
        assert_eq!(wv.len(), v.cols());
        for r in 0..v.rows() {
            for (o, s) in v.row_mut(r).iter_mut().zip(&wv) {
                *o *= s;
            }
        }
        self.push(v, Op::MulRowBroadcast(x, w))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut v = self.value(x).clone();
        v.scale_assign(s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let v = self.value(x).map(|e| act.apply(e));
        self.push(v, Op::Act(x, act))
    }

    /// Scales each row to unit L2 norm; rows with norm below [`NORM_EPS`]
    /// map to the zero row.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut v = src.clone();
        let mut norms = Vec::with_capacity(src.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = row.iter().map(|e| e * e).sum::<f64>().sqrt();
            if n < NORM_EPS {
                row.iter_mut().for_each(|e| *e = 0.0);
                norms.push(0.0);
            } else {
                row.iter_mut().for_each(|e| *e /= n);
                norms.push(n);
            }
        }
        self.push(v, Op::RowNormalize(x, norms))
    }

    /// Row-wise unit normalization of `raw`, falling back to the matching
    /// row of `fallback` when a raw row is degenerate.
    pub fn posterior_normalize(&mut self, raw: Var, fallback: Var) -> Result<Var, DegenerateRow> {
        let rv = self.value(raw);
        let fv = self.value(fallback);
        assert_eq!(rv.shape(), fv.shape());
        let mut out = Matrix::zeros(rv.rows(), rv.cols());
        let mut rows = Vec::with_capacity(rv.rows());
        for r in 0..rv.rows() {
            let n = rv.row(r).iter().map(|e| e * e).sum::<f64>().sqrt();
            let (src, norm, from_fallback) = if n >= NORM_EPS {
                (rv.row(r), n, false)
            } else {
                let nf = fv.row(r).iter().map(|e| e * e).sum::<f64>().sqrt();
                if nf < NORM_EPS {
                    return Err(DegenerateRow { row: r });
                }
                log::debug!("posterior row {r} degenerate, using prior direction");
                (fv.row(r), nf, true)
            };
            for (o, s) in out.row_mut(r).iter_mut().zip(src) {
                *o = s / norm;
            }
            rows.push(NormalizedRow { norm, from_fallback });
        }
        Ok(self.push(out, Op::PosteriorNormalize { raw, fallback, rows }))
    }

    /// Elementwise product with a constant matrix.
    pub fn mask_mul(&mut self, x: Var, mask: Arc<Matrix>) -> Var {
        let src = self.value(x);
        assert_eq!(src.shape(), mask.shape());
        let data = src.as_slice().iter().zip(mask.as_slice()).map(|(a, b)| a * b).collect();
        let v = Matrix::from_vec(src.rows(), src.cols(), data);
        self.push(v, Op::MaskMul(x, mask))
    }

    /// Constant sparse matrix times `x`.
    pub fn spmm(&mut self, m: Arc<SparseMatrix>, x: Var) -> Var {
        let v = m.matmul_dense(self.value(x));
        self.push(v, Op::SpMm(m, x))
    }

    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Var {
        let src = self.value(x);
        let c = src.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(src.row(i));
        }
        let v = Matrix::from_vec(index.len(), c, data);
        self.push(v, Op::GatherRows(x, index))
    }

    /// Picks columns of a single-row matrix.
    pub fn select_cols(&mut self, x: Var, cols: Vec<usize>) -> Var {
        let src = self.value(x);
        assert_eq!(src.rows(), 1);
        let v = Matrix::from_vec(1, cols.len(), cols.iter().map(|&c| src[(0, c)]).collect());
        self.push(v, Op::SelectCols(x, cols))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let v = Matrix::from_vec(av.rows(), av.cols() + bv.cols(), data);
        self.push(v, Op::ConcatCols(a, b))
    }

    /// For each of `blocks` stacked sub-matrices `x_b`, computes `left · x_b`.
    pub fn left_blocks(&mut self, left: Var, x: Var, blocks: usize) -> Var {
        let v = left_blocks_forward(self.value(left), self.value(x), blocks);
        self.push(v, Op::LeftBlocks { left, x, blocks })
    }

    pub fn left_blocks_const(&mut self, left: Arc<Matrix>, x: Var, blocks: usize) -> Var {
        let v = left_blocks_forward(&left, self.value(x), blocks);
        self.push(v, Op::LeftBlocksConst { left, x, blocks })
    }

    /// Per block: `a_b · b_bᵀ`.
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, blocks: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols());
        assert!(av.rows() % blocks == 0 && bv.rows() % blocks == 0);
        let (m, k, n) = (av.rows() / blocks, av.cols(), bv.rows() / blocks);
        let mut out = Matrix::zeros(blocks * m, n);
        for blk in 0..blocks {
            matmul_nt_into(
                &av.as_slice()[blk * m * k..(blk + 1) * m * k],
                &bv.as_slice()[blk * n * k..(blk + 1) * n * k],
                &mut out.as_mut_slice()[blk * m * n..(blk + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(out, Op::BlockMatMulNt { a, b, blocks })
    }

    /// Per block: `a_b · b_b`.
    pub fn block_matmul(&mut self, a: Var, b: Var, blocks: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.rows() % blocks == 0 && bv.rows() % blocks == 0);
        let (m, n, k) = (av.rows() / blocks, av.cols(), bv.cols());
        assert_eq!(bv.rows() / blocks, n, "block_matmul inner dimension mismatch");
        let mut out = Matrix::zeros(blocks * m, k);
        for blk in 0..blocks {
            matmul_into(
                &av.as_slice()[blk * m * n..(blk + 1) * m * n],
                &bv.as_slice()[blk * n * k..(blk + 1) * n * k],
                &mut out.as_mut_slice()[blk * m * k..(blk + 1) * m * k],
                m,
                n,
                k,
            );
        }
        self.push(out, Op::BlockMatMul { a, b, blocks })
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Mean over the rows of each block; output has one row per block.
    pub fn block_mean_rows(&mut self, x: Var, blocks: usize) -> Var {
        let src = self.value(x);
        assert!(src.rows() % blocks == 0);
        let m = src.rows() / blocks;
        let mut out = Matrix::zeros(blocks, src.cols());
        for blk in 0..blocks {
            for r in 0..m {
                let row = src.row(blk * m + r);
                for (o, v) in out.row_mut(blk).iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.row_mut(blk).iter_mut().for_each(|o| *o /= m as f64);
        }
        self.push(out, Op::BlockMeanRows(x, blocks))
    }

    /// `Σ_j coeffs[0, j] · items[j]`.
    pub fn weighted_sum(&mut self, coeffs: Var, items: Vec<Var>) -> Var {
        let c = self.value(coeffs);
        assert_eq!(c.rows(), 1);
        assert_eq!(c.cols(), items.len());
        assert!(!items.is_empty());
        let shape = self.value(items[0]).shape();
        let mut out = Matrix::zeros(shape.0, shape.1);
        for (j, &it) in items.iter().enumerate() {
            let w = c[(0, j)];
            let iv = self.value(it);
            assert_eq!(iv.shape(), shape);
            for (o, v) in out.as_mut_slice().iter_mut().zip(iv.as_slice()) {
                *o += w * v;
            }
        }
        self.push(out, Op::WeightedSum { coeffs, items })
    }

    /// `Σ mask · |pred − target|` as a `1×1` value.
    pub fn masked_abs_sum(&mut self, pred: Var, target: Arc<Matrix>, mask: Arc<Matrix>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape());
        assert_eq!(p.shape(), mask.shape());
        let s: f64 =
            p.as_slice().iter().zip(target.as_slice()).zip(mask.as_slice()).map(|((a, b), m)| m * (a - b).abs()).sum();
        self.push(Matrix::filled(1, 1, s), Op::MaskedAbsSum { pred, target, mask })
    }

    /// `(z·zᵀ − diag(z·zᵀ)) · h` without forming the `n×n` product.
    pub fn offdiag_product(&mut self, z: Var, h: Var) -> Var {
        let (zv, hv) = (self.value(z), self.value(h));
        assert_eq!(zv.rows(), hv.rows());
        let zth = zv.matmul_tn(hv);
        let mut out = zv.matmul(&zth);
        for r in 0..out.rows() {
            let d: f64 = zv.row(r).iter().map(|v| v * v).sum();
            for (o, x) in out.row_mut(r).iter_mut().zip(hv.row(r)) {
                *o -= d * x;
            }
        }
        self.push(out, Op::OffDiagProduct { z, h, zth })
    }

    /// Reverse pass from a `1×1` root seeded with `seed`.
    pub fn backward(&self, root: Var, seed: f64) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::filled(1, 1, seed));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::OffDiagProduct { z, h, zth } => {
                let (zv, hv) = (self.value(*z), self.value(*h));
                let dm = zv.matmul_tn(g);
                let gh: Vec<f64> =
                    (0..g.rows()).map(|r| g.row(r).iter().zip(hv.row(r)).map(|(a, b)| a * b).sum()).collect();
                accumulate(grads, *z, || {
                    let mut dz = g.matmul_nt(zth);
                    dz.add_assign(&hv.matmul_nt(&dm));
                    for (r, ghr) in gh.iter().enumerate() {
                        for (o, zr) in dz.row_mut(r).iter_mut().zip(zv.row(r)) {
                            *o -= 2.0 * ghr * zr;
                        }
                    }
                    dz
                });
                accumulate(grads, *h, || {
                    let mut dh = zv.matmul(&dm);
                    for r in 0..dh.rows() {
                        let d: f64 = zv.row(r).iter().map(|v| v * v).sum();
                        for (o, gr) in dh.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o -= d * gr;
                        }
                    }
                    dh
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, || g.matmul_nt(bv));
                accumulate(grads, *b, || av.matmul_tn(g));
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, || g.matmul(bv));
                accumulate(grads, *b, || g.matmul_tn(av));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, || g.clone());
                accumulate(grads, *b, || g.clone());
            }
            Op::AddRowBias(x, bias) => {
                accumulate(grads, *x, || g.clone());
                accumulate(grads, *bias, || column_sums(g));
            }
            Op::MulRowBroadcast(x, w) => {
                let wv = self.value(*w);
                let xv = self.value(*x);
                accumulate(grads, *x, || {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        for (o, s) in dx.row_mut(r).iter_mut().zip(wv.row(0)) {
                            *o *= s;
                        }
                    }
                    dx
                });
                accumulate(grads, *w, || {
                    let mut dw = Matrix::zeros(1, wv.cols());
                    for r in 0..g.rows() {
                        for ((o, gv), xe) in dw.row_mut(0).iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *o += gv * xe;
                        }
                    }
                    dw
                });
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, || {
                    let mut d = g.clone();
                    d.scale_assign(*s);
                    d
                });
            }
            Op::Act(x, act) => {
                let y = &node.value;
                accumulate(grads, *x, || {
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(y.as_slice())
                        .map(|(gv, yv)| gv * act.derivative_from_output(*yv))
                        .collect();
                    Matrix::from_vec(g.rows(), g.cols(), data)
                });
            }
            Op::RowNormalize(x, norms) => {
                let y = &node.value;
                accumulate(grads, *x, || {
                    let mut dx = Matrix::zeros(g.rows(), g.cols());
                    for (r, &n) in norms.iter().enumerate() {
                        if n > 0.0 {
                            normalize_vjp(y.row(r), g.row(r), n, dx.row_mut(r));
                        }
                    }
                    dx
                });
            }
            Op::PosteriorNormalize { raw, fallback, rows } => {
                let y = &node.value;
                let mut d_raw = Matrix::zeros(g.rows(), g.cols());
                let mut d_fb = Matrix::zeros(g.rows(), g.cols());
                for (r, info) in rows.iter().enumerate() {
                    let dst = if info.from_fallback { d_fb.row_mut(r) } else { d_raw.row_mut(r) };
                    normalize_vjp(y.row(r), g.row(r), info.norm, dst);
                }
                accumulate(grads, *raw, || d_raw);
                accumulate(grads, *fallback, || d_fb);
            }
            Op::MaskMul(x, mask) => {
                accumulate(grads, *x, || {
                    let data = g.as_slice().iter().zip(mask.as_slice()).map(|(a, b)| a * b).collect();
                    Matrix::from_vec(g.rows(), g.cols(), data)
                });
            }
            Op::SpMm(m, x) => {
                accumulate(grads, *x, || m.transpose_matmul_dense(g));
            }
            Op::GatherRows(x, index) => {
                let src_rows = self.value(*x).rows();
                accumulate(grads, *x, || {
                    let mut dx = Matrix::zeros(src_rows, g.cols());
                    for (r, &i) in index.iter().enumerate() {
                        for (o, v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    dx
                });
            }
            Op::SelectCols(x, cols) => {
                let width = self.value(*x).cols();
                accumulate(grads, *x, || {
                    let mut dx = Matrix::zeros(1, width);
                    for (j, &c) in cols.iter().enumerate() {
                        dx[(0, c)] += g[(0, j)];
                    }
                    dx
                });
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                accumulate(grads, *a, || Matrix::from_fn(g.rows(), p, |r, c| g[(r, c)]));
                accumulate(grads, *b, || Matrix::from_fn(g.rows(), q, |r, c| g[(r, p + c)]));
            }
            Op::LeftBlocks { left, x, blocks } => {
                let (lv, xv) = (self.value(*left), self.value(*x));
                let (dl, dx) = left_blocks_backward(lv, xv, g, *blocks, true);
                if let Some(dl) = dl {
                    accumulate(grads, *left, || dl);
                }
                accumulate(grads, *x, || dx);
            }
            Op::LeftBlocksConst { left, x, blocks } => {
                let (_, dx) = left_blocks_backward(left, self.value(*x), g, *blocks, false);
                accumulate(grads, *x, || dx);
            }
            Op::BlockMatMulNt { a, b, blocks } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows() / blocks, av.cols(), bv.rows() / blocks);
                let mut da = Matrix::zeros(av.rows(), k);
                let mut db = Matrix::zeros(bv.rows(), k);
                for blk in 0..*blocks {
                    let gs = &g.as_slice()[blk * m * n..(blk + 1) * m * n];
                    let a_s = &av.as_slice()[blk * m * k..(blk + 1) * m * k];
                    let b_s = &bv.as_slice()[blk * n * k..(blk + 1) * n * k];
                    matmul_into(gs, b_s, &mut da.as_mut_slice()[blk * m * k..(blk + 1) * m * k], m, n, k);
                    matmul_tn_into(gs, a_s, &mut db.as_mut_slice()[blk * n * k..(blk + 1) * n * k], m, n, k);
                }
                accumulate(grads, *a, || da);
                accumulate(grads, *b, || db);
            }
            Op::BlockMatMul { a, b, blocks } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n, k) = (av.rows() / blocks, av.cols(), bv.cols());
                let mut da = Matrix::zeros(av.rows(), n);
                let mut db = Matrix::zeros(bv.rows(), k);
                for blk in 0..*blocks {
                    let gs = &g.as_slice()[blk * m * k..(blk + 1) * m * k];
                    let a_s = &av.as_slice()[blk * m * n..(blk + 1) * m * n];
                    let b_s = &bv.as_slice()[blk * n * k..(blk + 1) * n * k];
                    matmul_nt_into(gs, b_s, &mut da.as_mut_slice()[blk * m * n..(blk + 1) * m * n], m, k, n);
                    matmul_tn_into(a_s, gs, &mut db.as_mut_slice()[blk * n * k..(blk + 1) * n * k], m, n, k);
                }
                accumulate(grads, *a, || da);
                accumulate(grads, *b, || db);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                accumulate(grads, *x, || {
                    let mut dx = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    dx
                });
            }
            Op::BlockMeanRows(x, blocks) => {
                let src_rows = self.value(*x).rows();
                let m = src_rows / blocks;
                accumulate(grads, *x, || {
                    let mut dx = Matrix::zeros(src_rows, g.cols());
                    for r in 0..src_rows {
                        let blk = r / m;
                        for (o, v) in dx.row_mut(r).iter_mut().zip(g.row(blk)) {
                            *o = v / m as f64;
                        }
                    }
                    dx
                });
            }
            Op::WeightedSum { coeffs, items } => {
                let c = self.value(*coeffs);
                let mut dc = Matrix::zeros(1, items.len());
                for (j, &it) in items.iter().enumerate() {
                    let iv = self.value(it);
                    dc[(0, j)] = iv.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
                    let w = c[(0, j)];
                    accumulate(grads, it, || {
                        let mut d = g.clone();
                        d.scale_assign(w);
                        d
                    });
                }
                accumulate(grads, *coeffs, || dc);
            }
            Op::MaskedAbsSum { pred, target, mask } => {
                let scale = g[(0, 0)];
                let p = self.value(*pred);
                accumulate(grads, *pred, || {
                    let data = p
                        .as_slice()
                        .iter()
                        .zip(target.as_slice())
                        .zip(mask.as_slice())
                        .map(|((a, b), m)| {
                            let diff = a - b;
                            let sign = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            scale * m * sign
                        })
                        .collect();
                    Matrix::from_vec(p.rows(), p.cols(), data)
                });
            }
        }
    }
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, or zeros shaped like `like` when unused.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, make: impl FnOnce() -> Matrix) {
    let d = make();
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

// d/dx of x/‖x‖ applied to upstream g, given y = x/‖x‖.
fn normalize_vjp(y: &[f64], g: &[f64], norm: f64, dst: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, yv), gv) in dst.iter_mut().zip(y).zip(g) {
        *o += (gv - yv * dot) / norm;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn left_blocks_forward(left: &Matrix, x: &Matrix, blocks: usize) -> Matrix {
    let (p, t) = left.shape();
    let d = x.cols();
    assert_eq!(x.rows(), blocks * t, "left_blocks: {} rows is not {blocks} blocks of {t}", x.rows());
    let mut out = Matrix::zeros(blocks * p, d);
    for blk in 0..blocks {
        matmul_into(
            left.as_slice(),
            &x.as_slice()[blk * t * d..(blk + 1) * t * d],
            &mut out.as_mut_slice()[blk * p * d..(blk + 1) * p * d],
            p,
            t,
            d,
        );
    }
    out
}

fn left_blocks_backward(
    left: &Matrix,
    x: &Matrix,
    g: &Matrix,
    blocks: usize,
    want_left: bool,
) -> (Option<Matrix>, Matrix) {
    let (p, t) = left.shape();
    let d = x.cols();
    let mut dl = want_left.then(|| Matrix::zeros(p, t));
    let mut dx = Matrix::zeros(x.rows(), d);
    for blk in 0..blocks {
        let gs = &g.as_slice()[blk * p * d..(blk + 1) * p * d];
        let xs = &x.as_slice()[blk * t * d..(blk + 1) * t * d];
        if let Some(dl) = dl.as_mut() {
            matmul_nt_into(gs, xs, dl.as_mut_slice(), p, d, t);
        }
        matmul_tn_into(left.as_slice(), gs, &mut dx.as_mut_slice()[blk * t * d..(blk + 1) * t * d], p, t, d);
    }
    (dl, dx)
}
