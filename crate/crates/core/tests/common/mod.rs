#![allow(dead_code)]

use cool::tape::{Tape, Var};
use cool::Matrix;
use rand::Rng;
use std::sync::Arc;

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// `Σ x ⊙ c` as a 1×1 tape value.
pub fn weighted_sum(tape: &mut Tape, x: Var, c: &Matrix) -> Var {
    let (rows, cols) = c.shape();
    let prod = tape.mask_mul(x, Arc::new(c.clone()));
    let left = tape.leaf(Matrix::filled(1, rows, 1.0));
    let right = tape.leaf(Matrix::filled(cols, 1, 1.0));
    let s = tape.matmul(left, prod);
    tape.matmul(s, right)
}

/// Central differences of `f` w.r.t. every entry of `inputs[k]`.
pub fn numeric_grad(inputs: &[Matrix], k: usize, h: f64, f: &dyn Fn(&[Matrix]) -> f64) -> Matrix {
    let mut work = inputs.to_vec();
    let mut out = Matrix::zeros(inputs[k].rows(), inputs[k].cols());
    for e in 0..inputs[k].len() {
        let orig = work[k].as_slice()[e];
        work[k].as_mut_slice()[e] = orig + h;
        let up = f(&work);
        work[k].as_mut_slice()[e] = orig - h;
        let down = f(&work);
        work[k].as_mut_slice()[e] = orig;
        out.as_mut_slice()[e] = (up - down) / (2.0 * h);
    }
    out
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-12)`.
pub fn rel_error(a: &Matrix, n: &Matrix) -> f64 {
    let diff = a.as_slice().iter().zip(n.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / a.norm().max(n.norm()).max(1e-12)
}

/// Checks analytic gradients of a scalar tape function of `inputs` against
/// central differences; returns the worst relative error over inputs.
pub fn gradient_check(inputs: &[Matrix], h: f64, record: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let f = |xs: &[Matrix]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = record(&mut tape, &vars);
        tape.value(out)[(0, 0)]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = record(&mut tape, &vars);
    let grads = tape.backward(out, 1.0);
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &inputs[k]);
        let numeric = numeric_grad(inputs, k, h, &f);
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}
