//! Prior message passing over the heterogeneous graph.
//!
//! ```text
//! h⁽⁰⁾ = x · W_in + b_in
//! h⁽ᵏ⁾ = act(h⁽ᵏ⁻¹⁾ · W_selfᵏ + mean_in(h⁽ᵏ⁻¹⁾) · W_aggᵏ + bᵏ)  (+ h⁽ᵏ⁻¹⁾ for k ≥ 2)
//! ```
//!
//! `mean_in` is the in-weight-normalized neighbor mean; vertices without
//! in-edges aggregate to zero.

use crate::error::{Error, Result};
use crate::het_graph::HetGraphTemplate;
use crate::matrix::Matrix;
use crate::params::{glorot, ParamGroup};
use crate::tape::{Activation, SparseMatrix, Tape, Var};
use rand::Rng;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorLayer {
    pub w_self: Matrix,
    pub w_agg: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorParams {
    /// `n_features × d` input projection.
    pub input_proj: Matrix,
    pub input_bias: Matrix,
    pub layers: Vec<PriorLayer>,
}

impl PriorParams {
    pub fn init<R: Rng + ?Sized>(n_features: usize, d: usize, n_layers: usize, rng: &mut R) -> Self {
        Self {
            input_proj: glorot(n_features, d, rng),
            input_bias: Matrix::zeros(1, d),
            layers: (0..n_layers)
                .map(|_| PriorLayer { w_self: glorot(d, d, rng), w_agg: glorot(d, d, rng), bias: Matrix::zeros(1, d) })
                .collect(),
        }
    }

    pub fn d(&self) -> usize {
        self.input_proj.cols()
    }
}

impl ParamGroup for PriorParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix)) {
        f("prior.input_proj".into(), &self.input_proj);
        f("prior.input_bias".into(), &self.input_bias);
        for (k, l) in self.layers.iter().enumerate() {
            f(format!("prior.layer{k}.w_self"), &l.w_self);
            f(format!("prior.layer{k}.w_agg"), &l.w_agg);
            f(format!("prior.layer{k}.bias"), &l.bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.input_proj);
        f(&mut self.input_bias);
        for l in &mut self.layers {
            f(&mut l.w_self);
            f(&mut l.w_agg);
            f(&mut l.bias);
        }
    }
}

/// Tape handles for [`PriorParams`].
#[derive(Debug, Clone)]
pub struct PriorVars {
    pub input_proj: Var,
    pub input_bias: Var,
    pub layers: Vec<[Var; 3]>,
}

impl PriorVars {
    pub fn bind(tape: &mut Tape, p: &PriorParams) -> Self {
        Self {
            input_proj: tape.leaf(p.input_proj.clone()),
            input_bias: tape.leaf(p.input_bias.clone()),
            layers: p
                .layers
                .iter()
                .map(|l| [tape.leaf(l.w_self.clone()), tape.leaf(l.w_agg.clone()), tape.leaf(l.bias.clone())])
                .collect(),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.input_proj, self.input_bias];
        for l in &self.layers {
            v.extend_from_slice(l);
        }
        v
    }
}

/// Records the prior encoder. With `message_passing == false` only the
/// input projection runs.
pub fn record_prior(
    tape: &mut Tape,
    vars: &PriorVars,
    x: Var,
    aggregator: &Arc<SparseMatrix>,
    activation: Activation,
    message_passing: bool,
) -> Result<Var> {
    let proj = tape.matmul(x, vars.input_proj);
    let mut h = tape.add_row_bias(proj, vars.input_bias);
    if !message_passing {
        return Ok(h);
    }
    for (k, [w_self, w_agg, bias]) in vars.layers.iter().copied().enumerate() {
        let agg = tape.spmm(aggregator.clone(), h);
        let own = tape.matmul(h, w_self);
        let nbr = tape.matmul(agg, w_agg);
        let pre = tape.add(own, nbr);
        let pre = tape.add_row_bias(pre, bias);
        let mut out = tape.activation(pre, activation);
        if k >= 1 {
            out = tape.add(out, h);
        }
        if !tape.value(out).is_finite() {
            return Err(Error::Numeric(format!("prior layer {} produced non-finite states", k + 1)));
        }
        h = out;
    }
    Ok(h)
}

/// Prior states (`r·n_nodes × d`, row `t·n_nodes + i`) for one normalized window.
pub fn prior_forward(
    template: &HetGraphTemplate,
    x_window: &Matrix,
    params: &PriorParams,
    activation: Activation,
) -> Result<Matrix> {
    if x_window.rows() != template.n_vertices() {
        return Err(Error::Data(format!(
            "input window has {} rows but the template has {} vertices",
            x_window.rows(),
            template.n_vertices()
        )));
    }
    if x_window.cols() != params.input_proj.rows() {
        return Err(Error::Data(format!(
            "input window has {} features but the projection expects {}",
            x_window.cols(),
            params.input_proj.rows()
        )));
    }
    let aggregator = Arc::new(template.mean_aggregator());
    let mut tape = Tape::new();
    let vars = PriorVars::bind(&mut tape, params);
    let x = tape.leaf(x_window.clone());
    let h = record_prior(&mut tape, &vars, x, &aggregator, activation, true)?;
    Ok(tape.value(h).clone())
}
