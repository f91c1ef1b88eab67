//! Road graphs, sensor readings, normalization, windowing and splits.

mod formats;
mod synth;

pub use formats::{
    load_adjacency, load_readings, write_adjacency, write_readings_binary, write_readings_text, ReadingsOptions,
    BINARY_MAGIC,
};
pub use synth::{generate_synthetic, LagPair, NodePattern, SyntheticSpec};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Static sensor graph. `adjacency[(i, j)]` is the weight of edge `i → j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    node_ids: Vec<String>,
    adjacency: Matrix,
}

impl RoadGraph {
    pub fn new(node_ids: Vec<String>, adjacency: Matrix) -> Result<Self> {
        if node_ids.is_empty() {
            return Err(Error::Data("road graph needs at least one node".into()));
        }
        if adjacency.shape() != (node_ids.len(), node_ids.len()) {
            return Err(Error::Data(format!(
                "adjacency is {:?} but there are {} node ids",
                adjacency.shape(),
                node_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &node_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate node id `{id}`")));
            }
        }
        if let Some(bad) = adjacency.as_slice().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Data(format!("adjacency weights must be finite and nonnegative, found {bad}")));
        }
        Ok(Self { node_ids, adjacency })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn weight(&self, src: usize, dst: usize) -> f64 {
        self.adjacency[(src, dst)]
    }

    pub fn nnz(&self) -> usize {
        self.adjacency.as_slice().iter().filter(|v| **v != 0.0).count()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|n| n == id)
    }
}

/// Readings laid out `[step][node][feature]`, with a same-shape observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    n_steps: usize,
    n_nodes: usize,
    n_features: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    /// Seconds between consecutive steps.
    pub interval_secs: u32,
    /// Unix timestamp of step 0.
    pub start_time: i64,
    pub feature_names: Vec<String>,
}

impl TrafficSeries {
    pub fn new(
        n_steps: usize,
        n_nodes: usize,
        n_features: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
        interval_secs: u32,
        start_time: i64,
    ) -> Result<Self> {
        let len = n_steps * n_nodes * n_features;
        if n_steps == 0 || n_nodes == 0 || n_features == 0 {
            return Err(Error::Data("series dimensions must all be at least 1".into()));
        }
        if values.len() != len || mask.len() != len {
            return Err(Error::Data(format!(
                "values ({}) and mask ({}) must both hold {len} entries",
                values.len(),
                mask.len()
            )));
        }
        if interval_secs == 0 {
            return Err(Error::Data("interval must be positive".into()));
        }
        let feature_names = if n_features == 1 {
            vec!["value".to_string()]
        } else {
            (0..n_features).map(|f| format!("f{f}")).collect()
        };
        Ok(Self { n_steps, n_nodes, n_features, values, mask, interval_secs, start_time, feature_names })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_features {
            return Err(Error::Data("feature name count does not match n_features".into()));
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn offset(&self, step: usize, node: usize, feature: usize) -> usize {
        (step * self.n_nodes + node) * self.n_features + feature
    }

    pub fn value(&self, step: usize, node: usize, feature: usize) -> f64 {
        self.values[self.offset(step, node, feature)]
    }

    pub fn observed(&self, step: usize, node: usize, feature: usize) -> bool {
        self.mask[self.offset(step, node, feature)]
    }

    pub fn timestamp(&self, step: usize) -> i64 {
        self.start_time + step as i64 * i64::from(self.interval_secs)
    }

    /// Leading `steps` time steps as a new series.
    pub fn head(&self, steps: usize) -> Result<TrafficSeries> {
        let steps = steps.min(self.n_steps);
        let len = steps * self.n_nodes * self.n_features;
        let mut s = TrafficSeries::new(
            steps,
            self.n_nodes,
            self.n_features,
            self.values[..len].to_vec(),
            self.mask[..len].to_vec(),
            self.interval_secs,
            self.start_time,
        )?;
        s.feature_names = self.feature_names.clone();
        Ok(s)
    }
}

/// Per-feature z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Data("normalizer mean/std lengths differ or are empty".into()));
        }
        if let Some(f) = std.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("feature {f} has degenerate standard deviation {}", std[f])));
        }
        Ok(Self { mean, std })
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn normalize(&self, value: f64, feature: usize) -> f64 {
        (value - self.mean[feature]) / self.std[feature]
    }

    #[inline]
    pub fn denormalize(&self, value: f64, feature: usize) -> f64 {
        value * self.std[feature] + self.mean[feature]
    }
}

/// Fits mean/std over the observed entries of the leading `train_fraction` of steps.
pub fn fit_normalizer(series: &TrafficSeries, train_fraction: f64) -> Result<Normalizer> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Config(format!("train_fraction must lie in (0, 1], got {train_fraction}")));
    }
    let steps = ((series.n_steps() as f64 * train_fraction).floor() as usize).clamp(1, series.n_steps());
    let nf = series.n_features();
    let mut count = vec![0usize; nf];
    let mut sum = vec![0.0; nf];
    for t in 0..steps {
        for i in 0..series.n_nodes() {
            for f in 0..nf {
                if series.observed(t, i, f) {
                    count[f] += 1;
                    sum[f] += series.value(t, i, f);
                }
            }
        }
    }
    if let Some(f) = count.iter().position(|c| *c == 0) {
        return Err(Error::Data(format!("feature {f} has no observed entries in the training range")));
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, c)| s / *c as f64).collect();
    let mut sq = vec![0.0; nf];
    for t in 0..steps {
        for i in 0..series.n_nodes() {
            for f in 0..nf {
                if series.observed(t, i, f) {
                    let dv = series.value(t, i, f) - mean[f];
                    sq[f] += dv * dv;
                }
            }
        }
    }
    let std = sq.iter().zip(&count).map(|(s, c)| (s / *c as f64).sqrt()).collect();
    Normalizer::new(mean, std)
}

/// One input/target window pair. Arrays are `[step][node][feature]`, in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub x_mask: Vec<bool>,
    pub y: Vec<f64>,
    pub y_mask: Vec<bool>,
    pub window_start: usize,
    pub input_steps: usize,
    pub output_steps: usize,
    pub n_nodes: usize,
    pub n_features: usize,
    /// Unix timestamp of the first input step.
    pub start_time: i64,
    pub interval_secs: u32,
}

impl Sample {
    #[inline]
    pub fn offset(&self, step: usize, node: usize, feature: usize) -> usize {
        (step * self.n_nodes + node) * self.n_features + feature
    }

    /// Unix timestamp of target step `h` (0-based).
    pub fn target_timestamp(&self, h: usize) -> i64 {
        self.start_time + (self.input_steps + h) as i64 * i64::from(self.interval_secs)
    }
}

/// Sliding windows ordered by start index.
pub fn make_windows(series: &TrafficSeries, t_in: usize, t_out: usize, stride: usize) -> Result<Vec<Sample>> {
    if stride == 0 {
        return Err(Error::Config("window stride must be at least 1".into()));
    }
    if t_in == 0 || t_out == 0 {
        return Err(Error::Config("input and output window lengths must be at least 1".into()));
    }
    if t_in + t_out > series.n_steps() {
        return Err(Error::Data(format!(
            "series has {} steps, fewer than input {t_in} + output {t_out}",
            series.n_steps()
        )));
    }
    let per_step = series.n_nodes() * series.n_features();
    let count = (series.n_steps() - t_in - t_out) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let s = k * stride;
        let xs = s * per_step..(s + t_in) * per_step;
        let ys = (s + t_in) * per_step..(s + t_in + t_out) * per_step;
        out.push(Sample {
            x: series.values()[xs.clone()].to_vec(),
            x_mask: series.mask()[xs].to_vec(),
            y: series.values()[ys.clone()].to_vec(),
            y_mask: series.mask()[ys].to_vec(),
            window_start: s,
            input_steps: t_in,
            output_steps: t_out,
            n_nodes: series.n_nodes(),
            n_features: series.n_features(),
            start_time: series.timestamp(s),
            interval_secs: series.interval_secs,
        });
    }
    Ok(out)
}

/// Fraction triple for a chronological train/val/test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Config(format!("split ratios must be positive, got {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

/// Contiguous split into (train, val, test) preserving order.
pub fn split_chronological<T>(mut items: Vec<T>, ratios: SplitRatios) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    ratios.validate()?;
    let n = items.len();
    let n_train = (n as f64 * ratios.train + 1e-9).floor() as usize;
    let n_val = (n as f64 * ratios.val + 1e-9).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Data(format!(
            "{n} samples cannot be split into non-empty partitions with ratios {:?}",
            [ratios.train, ratios.val, ratios.test]
        )));
    }
    let test = items.split_off(n_train + n_val);
    let val = items.split_off(n_train);
    Ok((items, val, test))
}

/// Windows split chronologically, with the normalizer fit on the steps
/// covered by the training windows.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub normalizer: Normalizer,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Leading steps of the series seen by training windows.
    pub train_steps: usize,
}

/// Windows every start index, splits, then thins each partition to its
/// stride (train keeps `window_start % train_stride == 0`, val/test likewise).
pub fn prepare(
    series: &TrafficSeries,
    t_in: usize,
    t_out: usize,
    ratios: SplitRatios,
    train_stride: usize,
    eval_stride: usize,
) -> Result<PreparedData> {
    if train_stride == 0 || eval_stride == 0 {
        return Err(Error::Config("window strides must be at least 1".into()));
    }
    let windows = make_windows(series, t_in, t_out, 1)?;
    let (train, val, test) = split_chronological(windows, ratios)?;
    let train_steps = train.last().map(|s| s.window_start + t_in + t_out).unwrap_or(0);
    let normalizer = fit_normalizer(series, train_steps as f64 / series.n_steps() as f64)?;
    let thin = |v: Vec<Sample>, stride: usize| -> Vec<Sample> {
        let first = v.first().map(|s| s.window_start).unwrap_or(0);
        v.into_iter().filter(|s| (s.window_start - first) % stride == 0).collect()
    };
    Ok(PreparedData {
        normalizer,
        train: thin(train, train_stride),
        val: thin(val, eval_stride),
        test: thin(test, eval_stride),
        train_steps,
    })
}

/// Sample order for one training epoch: identity, or a seeded shuffle.
pub fn epoch_order<R: Rng + ?Sized>(n: usize, shuffle: Option<&mut R>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    order
}
