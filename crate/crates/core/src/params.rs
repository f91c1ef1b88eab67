use crate::matrix::Matrix;
use rand::Rng;

/// Ordered, named collection of parameter tensors.
///
/// `visit` and `visit_mut` must walk tensors in the same order; that order
/// is also the order in which the matching `*Vars::all` lists tape leaves.
pub trait ParamGroup {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix));

    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit(&mut |name, m| out.push((name, m)));
        out
    }

    fn n_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }
}

/// Uniform Glorot initialization.
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
}
