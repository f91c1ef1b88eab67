//! Conjoint self-attention decoder.
//!
//! Each node's posterior sequence `U` (`T × d`) is summarized by
//! * a multi-rank branch per rank μ: keys and values are compressed along
//!   time by left matrices of shape `(T/μ) × T`,
//!   `Γ = softmax((U·Q)(K̃·U·K)ᵀ/√d) · (Ṽ·U·V)`, `γ = mean_rows(Γ)`;
//! * a multi-scale branch per window ε: `Δ` mean-pools `U` into `T/ε`
//!   segments, `Γ = softmax((Δ·Q)(Δ·K)ᵀ/√d) · (Δ·V)`, `γ = mean_rows(Γ)`.
//!
//! The summaries are fused by a softmax over learnable scalars and, joined
//! with the last posterior state, fed to a two-layer perceptron.
//!
//! The batched `record_*` functions process all nodes at once by stacking
//! node sequences node-major (`N·T × d`).

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{glorot, ParamGroup};
use crate::tape::{Activation, Tape, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct RankBranchParams {
    pub rank: usize,
    pub left_key: Matrix,
    pub left_value: Matrix,
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

/// `(T/factor) × T` matrix whose row `j` averages steps `j·factor .. (j+1)·factor`.
pub fn block_average(steps: usize, factor: usize) -> Result<Matrix> {
    if factor == 0 || steps % factor != 0 {
        return Err(Error::Config(format!("sequence length {steps} is not divisible by {factor}")));
    }
    let rows = steps / factor;
    Ok(Matrix::from_fn(rows, steps, |r, c| if c / factor == r { 1.0 / factor as f64 } else { 0.0 }))
}

impl RankBranchParams {
    /// Left matrices start as block averages plus Gaussian noise of std `left_noise`.
    pub fn init<R: Rng + ?Sized>(steps: usize, rank: usize, d: usize, left_noise: f64, rng: &mut R) -> Result<Self> {
        let base = block_average(steps, rank)?;
        let noise = Normal::new(0.0, left_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let jitter = |rng: &mut R| {
            let mut m = base.clone();
            if left_noise > 0.0 {
                m.as_mut_slice().iter_mut().for_each(|v| *v += noise.sample(rng));
            }
            m
        };
        let left_key = jitter(rng);
        let left_value = jitter(rng);
        Ok(Self {
            rank,
            left_key,
            left_value,
            query: glorot(d, d, rng),
            key: glorot(d, d, rng),
            value: glorot(d, d, rng),
        })
    }

    pub fn steps(&self) -> usize {
        self.left_key.cols()
    }
}

impl ParamGroup for RankBranchParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix)) {
        let p = format!("rank{}", self.rank);
        f(format!("{p}.left_key"), &self.left_key);
        f(format!("{p}.left_value"), &self.left_value);
        f(format!("{p}.query"), &self.query);
        f(format!("{p}.key"), &self.key);
        f(format!("{p}.value"), &self.value);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.left_key);
        f(&mut self.left_value);
        f(&mut self.query);
        f(&mut self.key);
        f(&mut self.value);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleBranchParams {
    pub window: usize,
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

impl ScaleBranchParams {
    pub fn init<R: Rng + ?Sized>(steps: usize, window: usize, d: usize, rng: &mut R) -> Result<Self> {
        block_average(steps, window)?;
        Ok(Self { window, query: glorot(d, d, rng), key: glorot(d, d, rng), value: glorot(d, d, rng) })
    }
}

impl ParamGroup for ScaleBranchParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix)) {
        let p = format!("scale{}", self.window);
        f(format!("{p}.query"), &self.query);
        f(format!("{p}.key"), &self.key);
        f(format!("{p}.value"), &self.value);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.query);
        f(&mut self.key);
        f(&mut self.value);
    }
}

/// Fusion logits: ranks first, then windows.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub logits: Matrix,
}

impl FusionParams {
    pub fn zeros(n: usize) -> Self {
        Self { logits: Matrix::zeros(1, n) }
    }
}

impl ParamGroup for FusionParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix)) {
        f("fusion.logits".into(), &self.logits);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.logits);
    }
}

/// Two-layer perceptron `2d → hidden → output_steps·n_features`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            w1: glorot(2 * d, hidden, rng),
            b1: Matrix::zeros(1, hidden),
            w2: glorot(hidden, out, rng),
            b2: Matrix::zeros(1, out),
        }
    }

    pub fn zeros(d: usize, hidden: usize, out: usize) -> Self {
        Self {
            w1: Matrix::zeros(2 * d, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, out),
            b2: Matrix::zeros(1, out),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }
}

impl ParamGroup for HeadParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix)) {
        f("head.w1".into(), &self.w1);
        f("head.b1".into(), &self.b1);
        f("head.w2".into(), &self.w2);
        f("head.b2".into(), &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RankVars {
    pub left_key: Var,
    pub left_value: Var,
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

impl RankVars {
    pub fn bind(tape: &mut Tape, p: &RankBranchParams) -> Self {
        Self {
            left_key: tape.leaf(p.left_key.clone()),
            left_value: tape.leaf(p.left_value.clone()),
            query: tape.leaf(p.query.clone()),
            key: tape.leaf(p.key.clone()),
            value: tape.leaf(p.value.clone()),
        }
    }

    pub fn all(&self) -> [Var; 5] {
        [self.left_key, self.left_value, self.query, self.key, self.value]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScaleVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

impl ScaleVars {
    pub fn bind(tape: &mut Tape, p: &ScaleBranchParams) -> Self {
        Self { query: tape.leaf(p.query.clone()), key: tape.leaf(p.key.clone()), value: tape.leaf(p.value.clone()) }
    }

    pub fn all(&self) -> [Var; 3] {
        [self.query, self.key, self.value]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl HeadVars {
    pub fn bind(tape: &mut Tape, p: &HeadParams) -> Self {
        Self {
            w1: tape.leaf(p.w1.clone()),
            b1: tape.leaf(p.b1.clone()),
            w2: tape.leaf(p.w2.clone()),
            b2: tape.leaf(p.b2.clone()),
        }
    }

    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Summary embedding (`n_nodes × d`) and attention scores of one branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchTrace {
    pub gamma: Var,
    /// Rank branch: `n_nodes·T × T/μ`. Scale branch: `n_nodes·T/ε × T/ε`.
    pub scores: Var,
    /// `Γ` before averaging.
    pub per_step: Var,
}

/// `sequences` is node-major `n_nodes·T × d`.
pub fn record_rank_branch(tape: &mut Tape, sequences: Var, n_nodes: usize, vars: &RankVars) -> BranchTrace {
    let d = tape.value(sequences).cols();
    let q = tape.matmul(sequences, vars.query);
    let k = tape.matmul(sequences, vars.key);
    let k = tape.left_blocks(vars.left_key, k, n_nodes);
    let v = tape.matmul(sequences, vars.value);
    let v = tape.left_blocks(vars.left_value, v, n_nodes);
    let logits = tape.block_matmul_nt(q, k, n_nodes);
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let scores = tape.softmax_rows(logits);
    let per_step = tape.block_matmul(scores, v, n_nodes);
    let gamma = tape.block_mean_rows(per_step, n_nodes);
    BranchTrace { gamma, scores, per_step }
}

/// `pool` is the `(T/ε) × T` block-average matrix for the branch's window.
pub fn record_scale_branch(
    tape: &mut Tape,
    sequences: Var,
    n_nodes: usize,
    pool: &Arc<Matrix>,
    vars: &ScaleVars,
) -> BranchTrace {
    let d = tape.value(sequences).cols();
    let delta = tape.left_blocks_const(pool.clone(), sequences, n_nodes);
    let q = tape.matmul(delta, vars.query);
    let k = tape.matmul(delta, vars.key);
    let v = tape.matmul(delta, vars.value);
    let logits = tape.block_matmul_nt(q, k, n_nodes);
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let scores = tape.softmax_rows(logits);
    let per_step = tape.block_matmul(scores, v, n_nodes);
    let gamma = tape.block_mean_rows(per_step, n_nodes);
    BranchTrace { gamma, scores, per_step }
}

/// Softmax-weighted sum of the branch embeddings whose logits are `active`.
/// Returns `(g, coefficients)`.
pub fn record_fuse(tape: &mut Tape, logits: Var, active: &[usize], gammas: Vec<Var>) -> Result<(Var, Var)> {
    if active.is_empty() || gammas.is_empty() {
        return Err(Error::Config("no branch embedding reaches fusion".into()));
    }
    assert_eq!(active.len(), gammas.len());
    let selected = tape.select_cols(logits, active.to_vec());
    let coeffs = tape.softmax_rows(selected);
    Ok((tape.weighted_sum(coeffs, gammas), coeffs))
}

/// `MLP(g ‖ u_T)`; output is `n_nodes × (output_steps·n_features)`.
pub fn record_head(tape: &mut Tape, g: Var, last_state: Var, vars: &HeadVars, activation: Activation) -> Var {
    let z = tape.concat_cols(g, last_state);
    let h = tape.matmul(z, vars.w1);
    let h = tape.add_row_bias(h, vars.b1);
    let h = tape.activation(h, activation);
    let out = tape.matmul(h, vars.w2);
    tape.add_row_bias(out, vars.b2)
}

/// Output of a single-node branch evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub gamma: Vec<f64>,
    pub scores: Matrix,
    /// Per-step outputs `Γ` before averaging.
    pub per_step: Matrix,
}

fn check_sequence(u: &Matrix, steps: usize, d: usize) -> Result<()> {
    if u.shape() != (steps, d) {
        return Err(Error::Data(format!("sequence is {:?}, branch expects {steps}×{d}", u.shape())));
    }
    Ok(())
}

/// Multi-rank branch on one node's `T × d` sequence.
pub fn rank_branch(u: &Matrix, params: &RankBranchParams) -> Result<BranchOutput> {
    check_sequence(u, params.steps(), params.query.rows())?;
    let mut tape = Tape::new();
    let seq = tape.leaf(u.clone());
    let vars = RankVars::bind(&mut tape, params);
    let trace = record_rank_branch(&mut tape, seq, 1, &vars);
    let per_step = branch_per_step(&tape, trace);
    Ok(BranchOutput {
        gamma: tape.value(trace.gamma).row(0).to_vec(),
        scores: tape.value(trace.scores).clone(),
        per_step,
    })
}

/// Multi-scale branch on one node's `T × d` sequence.
pub fn scale_branch(u: &Matrix, params: &ScaleBranchParams) -> Result<BranchOutput> {
    let steps = u.rows();
    check_sequence(u, steps, params.query.rows())?;
    let pool = Arc::new(block_average(steps, params.window)?);
    let mut tape = Tape::new();
    let seq = tape.leaf(u.clone());
    let vars = ScaleVars::bind(&mut tape, params);
    let trace = record_scale_branch(&mut tape, seq, 1, &pool, &vars);
    let per_step = branch_per_step(&tape, trace);
    Ok(BranchOutput {
        gamma: tape.value(trace.gamma).row(0).to_vec(),
        scores: tape.value(trace.scores).clone(),
        per_step,
    })
}

fn branch_per_step(tape: &Tape, trace: BranchTrace) -> Matrix {
    tape.value(trace.per_step).clone()
}

/// Softmax fusion of raw embeddings; returns `(g, coefficients)`.
pub fn fuse(gammas: &[Vec<f64>], logits: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if gammas.is_empty() {
        return Err(Error::Config("no branch embedding reaches fusion".into()));
    }
    if gammas.len() != logits.len() {
        return Err(Error::Data("fusion needs one logit per embedding".into()));
    }
    let mut tape = Tape::new();
    let logits = tape.leaf(Matrix::from_vec(1, logits.len(), logits.to_vec()));
    let items = gammas.iter().map(|g| tape.leaf(Matrix::from_vec(1, g.len(), g.clone()))).collect();
    let active: Vec<usize> = (0..gammas.len()).collect();
    let (g, c) = record_fuse(&mut tape, logits, &active, items)?;
    Ok((tape.value(g).row(0).to_vec(), tape.value(c).row(0).to_vec()))
}

/// Head output for one node reshaped to `output_steps × n_features`.
pub fn predict(
    g: &[f64],
    last_state: &[f64],
    params: &HeadParams,
    n_features: usize,
    activation: Activation,
) -> Result<Matrix> {
    let d = g.len();
    if last_state.len() != d || params.w1.rows() != 2 * d {
        return Err(Error::Data(format!(
            "head expects 2×{} inputs, got {} + {}",
            params.w1.rows() / 2,
            d,
            last_state.len()
        )));
    }
    if n_features == 0 || params.output_dim() % n_features != 0 {
        return Err(Error::Data("head output is not a whole number of steps".into()));
    }
    let mut tape = Tape::new();
    let gv = tape.leaf(Matrix::from_vec(1, d, g.to_vec()));
    let uv = tape.leaf(Matrix::from_vec(1, d, last_state.to_vec()));
    let vars = HeadVars::bind(&mut tape, params);
    let out = record_head(&mut tape, gv, uv, &vars, activation);
    let flat = tape.value(out).row(0).to_vec();
    Ok(Matrix::from_vec(params.output_dim() / n_features, n_features, flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_seq(r: &mut ChaCha8Rng, t: usize, d: usize) -> Matrix {
        Matrix::from_fn(t, d, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn rank_branch_shapes_and_rows() {
        let mut r = rng();
        let u = random_seq(&mut r, 12, 64);
        let p = RankBranchParams::init(12, 3, 64, 0.01, &mut r).unwrap();
        let out = rank_branch(&u, &p).unwrap();
        assert_eq!(out.scores.shape(), (12, 4));
        assert_eq!(out.per_step.shape(), (12, 64));
        assert_eq!(out.gamma.len(), 64);
        for row in 0..12 {
            assert!((out.scores.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_rank_rejected_at_construction() {
        assert!(RankBranchParams::init(12, 5, 8, 0.0, &mut rng()).is_err());
        assert!(ScaleBranchParams::init(12, 5, 8, &mut rng()).is_err());
    }

    #[test]
    fn time_constant_sequence_ignores_query() {
        let mut r = rng();
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let u = Matrix::from_fn(12, 8, |_, c| row[c]);
        // exact block averages keep every compressed row equal to u₀
        let mut p = RankBranchParams::init(12, 4, 8, 0.0, &mut r).unwrap();
        let a = rank_branch(&u, &p).unwrap();
        for t in 1..12 {
            assert!(a.per_step.row(t).iter().zip(a.per_step.row(0)).all(|(x, y)| (x - y).abs() < 1e-12));
        }
        p.query = glorot(8, 8, &mut r);
        let b = rank_branch(&u, &p).unwrap();
        for (x, y) in a.gamma.iter().zip(&b.gamma) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn full_window_scale_is_single_token() {
        let mut r = rng();
        let u = random_seq(&mut r, 12, 6);
        let p = ScaleBranchParams::init(12, 12, 6, &mut r).unwrap();
        let out = scale_branch(&u, &p).unwrap();
        assert_eq!(out.scores.shape(), (1, 1));
        assert!((out.scores[(0, 0)] - 1.0).abs() < 1e-15);
        let mean = Matrix::from_fn(1, 6, |_, c| (0..12).map(|t| u[(t, c)]).sum::<f64>() / 12.0);
        let expected = mean.matmul(&p.value);
        for c in 0..6 {
            assert!((out.gamma[c] - expected[(0, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_segment_counts() {
        let mut r = rng();
        let u = random_seq(&mut r, 12, 4);
        for (eps, count) in [(3, 4), (4, 3), (6, 2)] {
            let p = ScaleBranchParams::init(12, eps, 4, &mut r).unwrap();
            assert_eq!(scale_branch(&u, &p).unwrap().scores.shape(), (count, count));
        }
    }

    #[test]
    fn fusion_limits() {
        let gammas: Vec<Vec<f64>> = (0..6).map(|j| vec![j as f64, 1.0 - j as f64]).collect();
        let (g, c) = fuse(&gammas, &[0.7; 6]).unwrap();
        assert!((g[0] - 2.5).abs() < 1e-12 && (g[1] + 1.5).abs() < 1e-12);
        assert!(c.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-12));
        let (g, _) = fuse(&gammas, &[0.0, 0.0, 800.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert!(fuse(&[], &[]).is_err());
    }

    #[test]
    fn zero_head_predicts_zero() {
        let p = HeadParams::zeros(4, 8, 12);
        let y = predict(&[1.0; 4], &[2.0; 4], &p, 1, Activation::Relu).unwrap();
        assert_eq!(y.shape(), (12, 1));
        assert!(y.as_slice().iter().all(|v| *v == 0.0));
        assert!(predict(&[1.0; 4], &[2.0; 3], &p, 1, Activation::Relu).is_err());
    }
}
