//! Full forward pipeline: template → prior → affinity/penalty → posterior →
//! rank/scale branches → fusion → head.

use crate::config::{Component, TrainConfig};
use crate::dataset_io::{Normalizer, RoadGraph, Sample};
use crate::decoder_attention::{
    block_average, record_fuse, record_head, record_rank_branch, record_scale_branch, BranchTrace, FusionParams,
    HeadParams, HeadVars, RankBranchParams, RankVars, ScaleBranchParams, ScaleVars,
};
use crate::encoder_posterior::{off_diagonal_mask, record_posterior, ScoringParams};
use crate::encoder_prior::{record_prior, PriorParams, PriorVars};
use crate::error::{Error, Result};
use crate::het_graph::{build_template, HetGraphTemplate};
use crate::matrix::Matrix;
use crate::params::ParamGroup;
use crate::tape::{SparseMatrix, Tape, Var};
use rand::Rng;
use std::sync::Arc;

/// Every learnable tensor of the model. Ablations never change this set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub prior: PriorParams,
    pub scoring: ScoringParams,
    pub ranks: Vec<RankBranchParams>,
    pub scales: Vec<ScaleBranchParams>,
    pub fusion: FusionParams,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &TrainConfig, n_features: usize, rng: &mut R) -> Result<Self> {
        let (d, t) = (config.d, config.input_steps);
        let prior = PriorParams::init(n_features, d, config.prior_layers, rng);
        let ranks = config
            .ranks
            .iter()
            .map(|&mu| RankBranchParams::init(t, mu, d, config.left_init_noise, rng))
            .collect::<Result<Vec<_>>>()?;
        let scales =
            config.windows.iter().map(|&eps| ScaleBranchParams::init(t, eps, d, rng)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prior,
            scoring: ScoringParams::ones(d),
            fusion: FusionParams::zeros(ranks.len() + scales.len()),
            ranks,
            scales,
            head: HeadParams::init(d, config.head_hidden, config.output_steps * n_features, rng),
        })
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, m)| m).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    /// `(name, L2 norm)` per tensor.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.named_tensors().into_iter().map(|(n, m)| (n, m.norm())).collect()
    }
}

impl ParamGroup for ModelParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.prior.visit(f);
        self.scoring.visit(f);
        for r in &self.ranks {
            r.visit(f);
        }
        for s in &self.scales {
            s.visit(f);
        }
        self.fusion.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.prior.visit_mut(f);
        self.scoring.visit_mut(f);
        for r in &mut self.ranks {
            r.visit_mut(f);
        }
        for s in &mut self.scales {
            s.visit_mut(f);
        }
        self.fusion.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Tape leaves for [`ModelParams`], listed by [`ModelVars::all`] in visit order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub prior: PriorVars,
    pub score_w: Var,
    pub ranks: Vec<RankVars>,
    pub scales: Vec<ScaleVars>,
    pub fusion: Var,
    pub head: HeadVars,
}

impl ModelVars {
    pub fn bind(tape: &mut Tape, p: &ModelParams) -> Self {
        Self {
            prior: PriorVars::bind(tape, &p.prior),
            score_w: tape.leaf(p.scoring.w.clone()),
            ranks: p.ranks.iter().map(|r| RankVars::bind(tape, r)).collect(),
            scales: p.scales.iter().map(|s| ScaleVars::bind(tape, s)).collect(),
            fusion: tape.leaf(p.fusion.logits.clone()),
            head: HeadVars::bind(tape, &p.head),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut v = self.prior.all();
        v.push(self.score_w);
        for r in &self.ranks {
            v.extend(r.all());
        }
        for s in &self.scales {
            v.extend(s.all());
        }
        v.push(self.fusion);
        v.extend(self.head.all());
        v
    }
}

/// Handles to the interesting intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `n_nodes × (output_steps·n_features)`, normalized units.
    pub prediction: Var,
    pub prior: Var,
    pub posterior: Var,
    pub signed_scores: Option<Var>,
    pub ranks: Vec<BranchTrace>,
    pub scales: Vec<BranchTrace>,
    pub fusion_coeffs: Var,
}

/// Graph- and config-derived constants shared by every window.
#[derive(Debug, Clone)]
pub struct Model {
    config: TrainConfig,
    normalizer: Normalizer,
    n_nodes: usize,
    template: Arc<HetGraphTemplate>,
    aggregator: Arc<SparseMatrix>,
    off_diagonal: Arc<Matrix>,
    node_major: Arc<Vec<usize>>,
    last_step: Arc<Vec<usize>>,
    pools: Vec<Arc<Matrix>>,
}

impl Model {
    pub fn new(config: &TrainConfig, graph: &RoadGraph, normalizer: Normalizer) -> Result<Self> {
        config.validate()?;
        let n = graph.n_nodes();
        let t = config.input_steps;
        let template = build_template(graph, t, config.temporal_bidirectional)?;
        let aggregator = Arc::new(template.mean_aggregator());
        let node_major = (0..n).flat_map(|i| (0..t).map(move |s| s * n + i)).collect();
        let last_step = (0..n).map(|i| (t - 1) * n + i).collect();
        let pools = config.windows.iter().map(|&w| block_average(t, w).map(Arc::new)).collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            normalizer,
            n_nodes: n,
            off_diagonal: Arc::new(off_diagonal_mask(template.n_vertices())),
            template: Arc::new(template),
            aggregator,
            node_major: Arc::new(node_major),
            last_step: Arc::new(last_step),
            pools,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_features(&self) -> usize {
        self.normalizer.n_features()
    }

    pub fn template(&self) -> &HetGraphTemplate {
        &self.template
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelParams> {
        ModelParams::init(&self.config, self.n_features(), rng)
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        let c = &self.config;
        if sample.n_nodes != self.n_nodes
            || sample.n_features != self.n_features()
            || sample.input_steps != c.input_steps
            || sample.output_steps != c.output_steps
        {
            return Err(Error::Data(format!(
                "sample shape (T_in {}, T_out {}, N {}, F {}) does not match the model (T_in {}, T_out {}, N {}, F {})",
                sample.input_steps,
                sample.output_steps,
                sample.n_nodes,
                sample.n_features,
                c.input_steps,
                c.output_steps,
                self.n_nodes,
                self.n_features()
            )));
        }
        Ok(())
    }

    /// Normalized input, `r·n_nodes × n_features`; missing entries become 0.
    pub fn input_matrix(&self, sample: &Sample) -> Result<Matrix> {
        self.check_sample(sample)?;
        let f = sample.n_features;
        let data = sample
            .x
            .iter()
            .zip(&sample.x_mask)
            .enumerate()
            .map(|(k, (v, m))| if *m { self.normalizer.normalize(*v, k % f) } else { 0.0 })
            .collect();
        Ok(Matrix::from_vec(sample.input_steps * sample.n_nodes, f, data))
    }

    /// Normalized targets and mask in prediction layout
    /// (`n_nodes × output_steps·n_features`).
    pub fn target_matrices(&self, sample: &Sample) -> Result<(Matrix, Matrix)> {
        self.check_sample(sample)?;
        let (n, f, t_out) = (sample.n_nodes, sample.n_features, sample.output_steps);
        let mut y = Matrix::zeros(n, t_out * f);
        let mut mask = Matrix::zeros(n, t_out * f);
        for t in 0..t_out {
            for i in 0..n {
                for k in 0..f {
                    let off = sample.offset(t, i, k);
                    if sample.y_mask[off] {
                        y[(i, t * f + k)] = self.normalizer.normalize(sample.y[off], k);
                        mask[(i, t * f + k)] = 1.0;
                    }
                }
            }
        }
        Ok((y, mask))
    }

    /// Records the whole pipeline for one normalized input window.
    pub fn record(&self, tape: &mut Tape, vars: &ModelVars, x: Matrix) -> Result<ForwardTrace> {
        self.record_inner(tape, vars, x, false)
    }

    fn record_inner(&self, tape: &mut Tape, vars: &ModelVars, x: Matrix, keep_scores: bool) -> Result<ForwardTrace> {
        let c = &self.config;
        let n = self.n_nodes;
        let x = tape.leaf(x);
        let prior = record_prior(tape, &vars.prior, x, &self.aggregator, c.activation, c.enabled(Component::Prior))?;
        let (posterior, signed_scores) = if c.enabled(Component::Posterior) {
            let p = record_posterior(tape, prior, vars.score_w, &self.off_diagonal, c.posterior_top_k, keep_scores)?;
            (p.posterior, p.signed_scores)
        } else {
            (tape.row_normalize(prior), None)
        };

        let sequences = tape.gather_rows(posterior, self.node_major.clone());
        let mut active = Vec::new();
        let mut gammas = Vec::new();
        let mut ranks = Vec::new();
        let mut scales = Vec::new();
        if c.enabled(Component::MultiRank) {
            for (j, rv) in vars.ranks.iter().enumerate() {
                let tr = record_rank_branch(tape, sequences, n, rv);
                active.push(j);
                gammas.push(tr.gamma);
                ranks.push(tr);
            }
        }
        if c.enabled(Component::MultiScale) {
            let offset = vars.ranks.len();
            for (j, (sv, pool)) in vars.scales.iter().zip(&self.pools).enumerate() {
                let tr = record_scale_branch(tape, sequences, n, pool, sv);
                active.push(offset + j);
                gammas.push(tr.gamma);
                scales.push(tr);
            }
        }
        let (g, fusion_coeffs) = record_fuse(tape, vars.fusion, &active, gammas)?;
        let last = tape.gather_rows(posterior, self.last_step.clone());
        let prediction = record_head(tape, g, last, &vars.head, c.activation);
        if !tape.value(prediction).is_finite() {
            return Err(Error::Numeric("forward pass produced non-finite predictions".into()));
        }
        Ok(ForwardTrace { prediction, prior, posterior, signed_scores, ranks, scales, fusion_coeffs })
    }

    /// Normalized prediction in `[step][node][feature]` layout.
    pub fn forward(&self, params: &ModelParams, sample: &Sample) -> Result<Vec<f64>> {
        let x = self.input_matrix(sample)?;
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, params);
        let trace = self.record(&mut tape, &vars, x)?;
        Ok(self.to_sample_layout(tape.value(trace.prediction)))
    }

    /// Prediction in original units, `[step][node][feature]`.
    pub fn predict(&self, params: &ModelParams, sample: &Sample) -> Result<Vec<f64>> {
        let f = self.n_features();
        let mut y = self.forward(params, sample)?;
        for (k, v) in y.iter_mut().enumerate() {
            *v = self.normalizer.denormalize(*v, k % f);
        }
        Ok(y)
    }

    pub fn to_sample_layout(&self, pred: &Matrix) -> Vec<f64> {
        let (n, f, t_out) = (self.n_nodes, self.n_features(), self.config.output_steps);
        let mut out = vec![0.0; t_out * n * f];
        for t in 0..t_out {
            for i in 0..n {
                for k in 0..f {
                    out[(t * n + i) * f + k] = pred[(i, t * f + k)];
                }
            }
        }
        out
    }

    /// Masked absolute-error sum over a sample, its masked-in count, and the
    /// gradient of the sum w.r.t. every parameter (visit order).
    pub fn sample_gradient(&self, params: &ModelParams, sample: &Sample) -> Result<(f64, usize, Vec<Matrix>)> {
        let x = self.input_matrix(sample)?;
        let (y, mask) = self.target_matrices(sample)?;
        let count = mask.as_slice().iter().filter(|m| **m > 0.0).count();
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, params);
        let trace = self.record(&mut tape, &vars, x)?;
        let loss = tape.masked_abs_sum(trace.prediction, Arc::new(y), Arc::new(mask));
        let total = tape.value(loss)[(0, 0)];
        let grads = tape.backward(loss, 1.0);
        let leaves = vars.all();
        let grads = leaves.iter().map(|&v| grads.get_or_zeros(v, tape.value(v))).collect();
        Ok((total, count, grads))
    }

    /// Intermediate values for inspection and plotting.
    pub fn inspect(&self, params: &ModelParams, sample: &Sample) -> Result<Inspection> {
        let x = self.input_matrix(sample)?;
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, params);
        let tr = self.record_inner(&mut tape, &vars, x, true)?;
        let value = |v: Var| tape.value(v).clone();
        Ok(Inspection {
            prior: value(tr.prior),
            posterior: value(tr.posterior),
            signed_scores: tr.signed_scores.map(value),
            rank_scores: self.config.ranks.iter().zip(&tr.ranks).map(|(&mu, b)| (mu, value(b.scores))).collect(),
            scale_scores: self.config.windows.iter().zip(&tr.scales).map(|(&eps, b)| (eps, value(b.scores))).collect(),
            fusion_coeffs: tape.value(tr.fusion_coeffs).row(0).to_vec(),
            prediction: self.to_sample_layout(tape.value(tr.prediction)),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Inspection {
    pub prior: Matrix,
    pub posterior: Matrix,
    /// `Ŵ − P̂`, absent when the posterior stage is ablated.
    pub signed_scores: Option<Matrix>,
    /// `(rank, n_nodes·T × T/μ)` stacked per node.
    pub rank_scores: Vec<(usize, Matrix)>,
    /// `(window, n_nodes·T/ε × T/ε)` stacked per node.
    pub scale_scores: Vec<(usize, Matrix)>,
    pub fusion_coeffs: Vec<f64>,
    pub prediction: Vec<f64>,
}

impl Inspection {
    /// Splits signed scores back into the affinity and penalty graphs.
    pub fn affinity_penalty(&self) -> Option<crate::encoder_posterior::AffinityPenaltyPair> {
        self.signed_scores.as_ref().map(|s| crate::encoder_posterior::AffinityPenaltyPair {
            w_hat: s.map(|v| v.max(0.0)),
            p_hat: s.map(|v| (-v).max(0.0)),
        })
    }
}
