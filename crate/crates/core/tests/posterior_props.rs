mod common;

use common::{gradient_check, random_matrix, weighted_sum};
use cool::encoder_posterior::{
    build_pair, correlation_loss, correlation_score, off_diagonal_mask, posterior_update, record_posterior,
    AffinityPenaltyPair, ScoringParams,
};
use cool::tape::Tape;
use cool::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn states() -> impl Strategy<Value = (Matrix, ScoringParams)> {
    (2usize..16, 1usize..7).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-2.0f64..2.0, n * d).prop_map(move |v| Matrix::from_vec(n, d, v)),
            prop::collection::vec(0.05f64..3.0, d).prop_map(move |w| ScoringParams { w: Matrix::from_vec(1, d, w) }),
        )
    })
}

fn nonzero_rows(h: &Matrix) -> bool {
    (0..h.rows()).all(|i| h.row(i).iter().map(|v| v * v).sum::<f64>() > 1e-6)
}

/// Direct evaluation of the update, one vertex at a time.
fn loop_update(h: &Matrix, pair: &AffinityPenaltyPair) -> Matrix {
    let (n, d) = h.shape();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let mut raw = h.row(i).to_vec();
        for j in 0..n {
            for k in 0..d {
                raw[k] += (pair.w_hat[(i, j)] - pair.p_hat[(i, j)]) * h[(j, k)];
            }
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for k in 0..d {
            out[(i, k)] = raw[k] / norm;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn graphs_are_disjoint_symmetric_and_bounded((h, params) in states()) {
        let pair = build_pair(&h, &params).unwrap();
        let n = h.rows();
        for i in 0..n {
            prop_assert_eq!(pair.w_hat[(i, i)], 0.0);
            prop_assert_eq!(pair.p_hat[(i, i)], 0.0);
            for j in 0..n {
                let (w, p) = (pair.w_hat[(i, j)], pair.p_hat[(i, j)]);
                prop_assert_eq!(w * p, 0.0);
                prop_assert!((0.0..=1.0).contains(&w) && (0.0..=1.0).contains(&p));
                prop_assert!((w - pair.w_hat[(j, i)]).abs() <= 1e-9);
                prop_assert!((p - pair.p_hat[(j, i)]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn posterior_rows_are_unit_and_match_the_loop((h, params) in states()) {
        prop_assume!(nonzero_rows(&h));
        let pair = build_pair(&h, &params).unwrap();
        let u = posterior_update(&h, &pair).unwrap();
        let oracle = loop_update(&h, &pair);
        for i in 0..u.rows() {
            let norm = u.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
        // Rows whose raw sum nearly cancels are ill-conditioned for any implementation.
        let raw_ok = (0..h.rows()).all(|i| {
            let mut raw = h.row(i).to_vec();
            for j in 0..h.rows() {
                for (k, r) in raw.iter_mut().enumerate() {
                    *r += (pair.w_hat[(i, j)] - pair.p_hat[(i, j)]) * h[(j, k)];
                }
            }
            raw.iter().map(|v| v * v).sum::<f64>() > 1e-6
        });
        if raw_ok {
            prop_assert!(u.max_abs_diff(&oracle) < 1e-10);
        }
    }

    #[test]
    fn score_ignores_common_positive_rescaling(
        (h, params) in states(),
        scale in 0.01f64..100.0,
    ) {
        prop_assume!(nonzero_rows(&h));
        let a = h.row(0);
        let b = h.row(1);
        let sa: Vec<f64> = a.iter().map(|v| v * scale).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * scale).collect();
        let s = correlation_score(a, b, &params);
        prop_assert!((s - correlation_score(&sa, &sb, &params)).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn update_never_worsens_the_objective((h, params) in states()) {
        prop_assume!(nonzero_rows(&h));
        let pair = build_pair(&h, &params).unwrap();
        let u = posterior_update(&h, &pair).unwrap();
        let mut base = h.clone();
        for i in 0..h.rows() {
            let norm = h.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            base.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
        prop_assert!(correlation_loss(&u, &h, &pair, 1.0) <= correlation_loss(&base, &h, &pair, 1.0) + 1e-9);
    }
}

/// Projected gradient descent for one row of the objective on the unit sphere.
fn descend_row(h: &Matrix, pair: &AffinityPenaltyPair, i: usize, beta: f64) -> Vec<f64> {
    let d = h.cols();
    let mut u: Vec<f64> = h.row(i).to_vec();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= norm);
    for _ in 0..5000 {
        let mut grad = vec![0.0; d];
        for j in 0..h.rows() {
            let c = pair.w_hat[(i, j)] - pair.p_hat[(i, j)] + if i == j { beta } else { 0.0 };
            for k in 0..d {
                grad[k] += 2.0 * c * (u[k] - h[(j, k)]);
            }
        }
        for k in 0..d {
            u[k] -= 0.05 * grad[k];
        }
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
    }
    u
}

#[test]
fn hand_instance_matches_loop_and_constrained_minimum() {
    let h = Matrix::from_rows(&[vec![1.0, 0.0, 0.5], vec![0.2, 1.0, 0.0], vec![-0.4, 0.3, 1.0]]);
    let pair = AffinityPenaltyPair {
        w_hat: Matrix::from_rows(&[vec![0.0, 0.5, 0.0], vec![0.5, 0.0, 0.0], vec![0.0, 0.0, 0.0]]),
        p_hat: Matrix::from_rows(&[vec![0.0, 0.0, 0.3], vec![0.0, 0.0, 0.0], vec![0.3, 0.0, 0.0]]),
    };
    let u = posterior_update(&h, &pair).unwrap();
    // Row 0 by hand: h0 + 0.5·h1 − 0.3·h2 = (1.22, 0.41, 0.2).
    let raw0 = [1.22, 0.41, 0.2];
    let n0 = raw0.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
    for k in 0..3 {
        assert!((u[(0, k)] - raw0[k] / n0).abs() < 1e-12);
    }
    assert!(u.max_abs_diff(&loop_update(&h, &pair)) < 1e-10);
    for i in 0..3 {
        let v = descend_row(&h, &pair, i, 1.0);
        let cos: f64 = v.iter().zip(u.row(i)).map(|(a, b)| a * b).sum();
        assert!(1.0 - cos < 1e-3, "row {i}: cos {cos}");
    }
}

#[test]
fn gradients_through_scores_graphs_and_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (d, n, r) = (8, 3, 4);
    let mut checked = 0;
    while checked < 5 {
        let h = random_matrix(&mut rng, n * r, d, 1.0);
        let w = Matrix::from_fn(1, d, |_, _| rand::Rng::random_range(&mut rng, 0.5..1.5));
        let pair_scores = {
            let params = ScoringParams { w: w.clone() };
            let pair = build_pair(&h, &params).unwrap();
            (0..n * r)
                .flat_map(|i| (0..n * r).filter(move |j| *j != i).map(move |j| (i, j)))
                .map(|(i, j)| pair.w_hat[(i, j)] - pair.p_hat[(i, j)])
                .collect::<Vec<_>>()
        };
        if pair_scores.iter().any(|s| s.abs() < 1e-3) {
            continue;
        }
        let c = random_matrix(&mut rng, n * r, d, 1.0);
        let mask = Arc::new(off_diagonal_mask(n * r));
        for keep_scores in [false, true] {
            let err = gradient_check(&[h.clone(), w.clone()], 1e-5, &|tape: &mut Tape, v| {
                let tr = record_posterior(tape, v[0], v[1], &mask, 0, keep_scores).unwrap();
                weighted_sum(tape, tr.posterior, &c)
            });
            assert!(err < 1e-4, "relative error {err}");
        }
        checked += 1;
    }
}
