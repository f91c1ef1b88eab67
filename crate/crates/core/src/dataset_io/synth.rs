//! Seeded synthetic traffic: daily cycles, a slow AR(1) drift, white noise,
//! and sensor pairs whose readings are exact lagged copies of another sensor.

use super::{RoadGraph, TrafficSeries};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// `dst(t) = clean(src)(t − lag) + own noise`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagPair {
    pub src: usize,
    pub dst: usize,
    pub lag: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodePattern {
    pub base: f64,
    pub amplitude: f64,
    /// Radians.
    pub phase: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_nodes: usize,
    pub n_days: usize,
    pub interval_minutes: u32,
    pub start_time: i64,
    /// Explicit per-node patterns; when empty, patterns are drawn from the
    /// fields below.
    pub nodes: Vec<NodePattern>,
    pub base_level: f64,
    pub base_spread: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    /// Stationary standard deviation of the per-node AR(1) drift.
    pub drift_std: f64,
    /// AR(1) coefficient of the drift, in (−1, 1).
    pub drift_ar: f64,
    pub lag_pairs: Vec<LagPair>,
    /// Probability of each non-ring directed edge.
    pub extra_edge_prob: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_nodes: 8,
            n_days: 14,
            interval_minutes: 5,
            // 2012-03-01T00:00:00Z
            start_time: 1_330_560_000,
            nodes: Vec::new(),
            base_level: 5.0,
            base_spread: 1.0,
            amplitude: 1.0,
            noise_std: 0.1,
            drift_std: 0.5,
            drift_ar: 0.98,
            lag_pairs: vec![LagPair { src: 0, dst: 4, lag: 6 }, LagPair { src: 2, dst: 6, lag: 12 }],
            extra_edge_prob: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_nodes < 2 {
            return bad(format!("synthetic data needs at least 2 nodes, got {}", self.n_nodes));
        }
        if self.n_days == 0 {
            return bad("n_days must be at least 1".into());
        }
        if self.interval_minutes == 0 || 1440 % self.interval_minutes != 0 {
            return bad(format!("interval_minutes {} must divide a day", self.interval_minutes));
        }
        if !self.nodes.is_empty() && self.nodes.len() != self.n_nodes {
            return bad(format!("{} node patterns given for {} nodes", self.nodes.len(), self.n_nodes));
        }
        if self.noise_std < 0.0 || self.nodes.iter().any(|p| p.noise_std < 0.0) {
            return bad("noise std must be nonnegative".into());
        }
        if !(self.drift_std >= 0.0) || !(self.drift_ar.abs() < 1.0) {
            return bad("drift_std must be nonnegative and |drift_ar| < 1".into());
        }
        if !(0.0..=1.0).contains(&self.extra_edge_prob) {
            return bad("extra_edge_prob must lie in [0, 1]".into());
        }
        for p in &self.lag_pairs {
            if p.src >= self.n_nodes || p.dst >= self.n_nodes || p.src == p.dst {
                return bad(format!("invalid lag pair {p:?}"));
            }
        }
        Ok(())
    }

    pub fn steps_per_day(&self) -> usize {
        (1440 / self.interval_minutes) as usize
    }
}

/// Deterministic in `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(TrafficSeries, RoadGraph)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n_nodes;
    let per_day = spec.steps_per_day();
    let n_steps = spec.n_days * per_day;
    let patterns: Vec<NodePattern> = if spec.nodes.is_empty() {
        (0..n)
            .map(|_| NodePattern {
                base: spec.base_level + rng.random_range(-1.0..=1.0) * spec.base_spread,
                amplitude: spec.amplitude,
                phase: rng.random_range(0.0..TAU),
                noise_std: spec.noise_std,
            })
            .collect()
    } else {
        spec.nodes.clone()
    };

    // clean signals over a pre-roll long enough for every lag chain
    let pre: usize = spec.lag_pairs.iter().map(|p| p.lag).sum();
    let total = pre + n_steps;
    let std_normal = Normal::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let innovation = (1.0 - spec.drift_ar * spec.drift_ar).sqrt() * spec.drift_std;
    let mut clean = vec![vec![0.0; total]; n];
    for (i, p) in patterns.iter().enumerate() {
        let mut drift = spec.drift_std * std_normal.sample(&mut rng);
        for (k, c) in clean[i].iter_mut().enumerate() {
            let t = k as f64 - pre as f64;
            let cycle = p.amplitude * (TAU * t / per_day as f64 + p.phase).sin();
            *c = p.base + cycle + drift;
            drift = spec.drift_ar * drift + innovation * std_normal.sample(&mut rng);
        }
    }
    for pair in &spec.lag_pairs {
        let src = clean[pair.src].clone();
        let dst = &mut clean[pair.dst];
        for k in 0..total {
            dst[k] = if k >= pair.lag { src[k - pair.lag] } else { src[0] };
        }
    }

    let mut values = vec![0.0; n_steps * n];
    for t in 0..n_steps {
        for i in 0..n {
            let noise =
                if patterns[i].noise_std > 0.0 { patterns[i].noise_std * std_normal.sample(&mut rng) } else { 0.0 };
            values[t * n + i] = clean[i][pre + t] + noise;
        }
    }

    let mut adjacency = Matrix::zeros(n, n);
    for i in 0..n {
        let j = (i + 1) % n;
        adjacency[(i, j)] = 1.0;
        adjacency[(j, i)] = 1.0;
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && adjacency[(i, j)] == 0.0 && rng.random_bool(spec.extra_edge_prob) {
                adjacency[(i, j)] = rng.random_range(0.1..1.0);
            }
        }
    }
    for p in &spec.lag_pairs {
        adjacency[(p.src, p.dst)] = 1.0;
    }
    let ids = (0..n).map(|i| format!("s{i:03}")).collect();
    let graph = RoadGraph::new(ids, adjacency)?;
    let series = TrafficSeries::new(
        n_steps,
        n,
        1,
        values,
        vec![true; n_steps * n],
        spec.interval_minutes * 60,
        spec.start_time,
    )?
    .with_feature_names(vec!["speed".to_string()])?;
    Ok((series, graph))
}
