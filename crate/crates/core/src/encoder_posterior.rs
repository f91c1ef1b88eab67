//! Affinity/penalty graphs from weighted-cosine scores, and the closed-form
//! posterior update
//!
//! ```text
//! u*_i = normalize(h_i + Σ_j Ŵ(i,j)·h_j − Σ_j P̂(i,j)·h_j)
//! ```
//!
//! over all vertices of one window. Self-pairs are excluded from Ŵ and P̂
//! because the update already carries `h_i`.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::ParamGroup;
use crate::tape::{Tape, Var, NORM_EPS};
use std::sync::Arc;

/// Learnable per-dimension importance vector `w` (`1 × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringParams {
    pub w: Matrix,
}

impl ScoringParams {
    pub fn ones(d: usize) -> Self {
        Self { w: Matrix::filled(1, d, 1.0) }
    }
}

impl ParamGroup for ScoringParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix)) {
        f("posterior.score_w".into(), &self.w);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.w);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityPenaltyPair {
    pub w_hat: Matrix,
    pub p_hat: Matrix,
}

impl AffinityPenaltyPair {
    pub fn n_vertices(&self) -> usize {
        self.w_hat.rows()
    }

    /// `N × N` view averaging Ŵ over every pair of time offsets.
    pub fn aggregate_affinity(&self, n_nodes: usize) -> Matrix {
        let nv = self.n_vertices();
        let r = nv / n_nodes;
        let mut out = Matrix::zeros(n_nodes, n_nodes);
        for a in 0..nv {
            for b in 0..nv {
                out[(a % n_nodes, b % n_nodes)] += self.w_hat[(a, b)];
            }
        }
        out.scale_assign(1.0 / (r * r) as f64);
        out
    }
}

/// Cosine similarity of `w ⊙ a` and `w ⊙ b`; 0 when either scaled vector vanishes.
pub fn correlation_score(h_a: &[f64], h_b: &[f64], params: &ScoringParams) -> f64 {
    let w = params.w.row(0);
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for ((a, b), s) in h_a.iter().zip(h_b).zip(w) {
        let (x, y) = (a * s, b * s);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < NORM_EPS || nb < NORM_EPS {
        log::debug!("correlation score of a zero-norm vector treated as 0");
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Dense affinity/penalty graphs over every ordered pair of distinct vertices.
pub fn build_pair(prior: &Matrix, params: &ScoringParams) -> Result<AffinityPenaltyPair> {
    if !prior.is_finite() {
        return Err(Error::Numeric("prior states contain non-finite values".into()));
    }
    if params.w.cols() != prior.cols() {
        return Err(Error::Data(format!("scoring vector has {} dims, states have {}", params.w.cols(), prior.cols())));
    }
    let n = prior.rows();
    let mut w_hat = Matrix::zeros(n, n);
    let mut p_hat = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let s = correlation_score(prior.row(i), prior.row(j), params);
            if s > 0.0 {
                w_hat[(i, j)] = s;
                w_hat[(j, i)] = s;
            } else if s < 0.0 {
                p_hat[(i, j)] = -s;
                p_hat[(j, i)] = -s;
            }
        }
    }
    Ok(AffinityPenaltyPair { w_hat, p_hat })
}

/// Closed-form posterior states, one unit-norm row per vertex.
pub fn posterior_update(prior: &Matrix, pair: &AffinityPenaltyPair) -> Result<Matrix> {
    let n = prior.rows();
    if pair.w_hat.shape() != (n, n) || pair.p_hat.shape() != (n, n) {
        return Err(Error::Data("affinity/penalty graphs do not match the prior block".into()));
    }
    let signed = Matrix::from_fn(n, n, |i, j| pair.w_hat[(i, j)] - pair.p_hat[(i, j)]);
    let mut raw = signed.matmul(prior);
    raw.add_assign(prior);
    let mut tape = Tape::new();
    let r = tape.leaf(raw);
    let h = tape.leaf(prior.clone());
    let u = tape
        .posterior_normalize(r, h)
        .map_err(|e| Error::Numeric(format!("posterior update: vertex {} has a zero prior state", e.row)))?;
    Ok(tape.value(u).clone())
}

/// Correlation objective with squared-Euclidean distance:
/// `Σ Ŵ‖u_i − h_j‖² − Σ P̂‖u_i − h_j‖² + β Σ‖u_i − h_i‖²`.
pub fn correlation_loss(posterior: &Matrix, prior: &Matrix, pair: &AffinityPenaltyPair, beta: f64) -> f64 {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let n = prior.rows();
    let mut loss = 0.0;
    for i in 0..n {
        let u = posterior.row(i);
        for j in 0..n {
            let (w, p) = (pair.w_hat[(i, j)], pair.p_hat[(i, j)]);
            if w != 0.0 || p != 0.0 {
                loss += (w - p) * sq(u, prior.row(j));
            }
        }
        loss += beta * sq(u, prior.row(i));
    }
    loss
}

/// Off-diagonal indicator for `n` vertices.
pub fn off_diagonal_mask(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
}

/// Tape outputs of the posterior stage.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorTrace {
    pub posterior: Var,
    /// Signed scores with zero diagonal, i.e. `Ŵ − P̂`; only materialized
    /// when requested or when top-k pruning needs them.
    pub signed_scores: Option<Var>,
}

/// Records score → graphs → posterior. `top_k > 0` keeps only the `k`
/// largest-magnitude scores in each row.
pub fn record_posterior(
    tape: &mut Tape,
    prior: Var,
    score_w: Var,
    off_diagonal: &Arc<Matrix>,
    top_k: usize,
    keep_scores: bool,
) -> Result<PosteriorTrace> {
    let scaled = tape.mul_row_broadcast(prior, score_w);
    let unit = tape.row_normalize(scaled);
    let n = tape.value(unit).rows();
    let (messages, signed_scores) = if !keep_scores && !(top_k > 0 && top_k + 1 < n) {
        (tape.offdiag_product(unit, prior), None)
    } else {
        let scores = tape.matmul_nt(unit, unit);
        let mask = if top_k > 0 && top_k + 1 < n {
            Arc::new(top_k_mask(tape.value(scores), top_k))
        } else {
            off_diagonal.clone()
        };
        let signed = tape.mask_mul(scores, mask);
        (tape.matmul(signed, prior), Some(signed))
    };
    let raw = tape.add(prior, messages);
    let posterior = tape
        .posterior_normalize(raw, prior)
        .map_err(|e| Error::Numeric(format!("posterior update: vertex {} has a zero prior state", e.row)))?;
    Ok(PosteriorTrace { posterior, signed_scores })
}

fn top_k_mask(scores: &Matrix, k: usize) -> Matrix {
    let n = scores.rows();
    let mut mask = Matrix::zeros(n, n);
    let mut idx: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        idx.clear();
        idx.extend((0..n).filter(|&j| j != i));
        idx.sort_by(|&a, &b| scores[(i, b)].abs().total_cmp(&scores[(i, a)].abs()).then(a.cmp(&b)));
        for &j in idx.iter().take(k) {
            mask[(i, j)] = 1.0;
        }
    }
    mask
}
