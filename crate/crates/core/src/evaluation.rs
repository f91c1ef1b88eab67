//! Masked horizon metrics, the historical-average baseline and reports.

use crate::dataset_io::{Sample, TrafficSeries};
use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

const SECONDS_PER_DAY: i64 = 86_400;
const SECONDS_PER_WEEK: i64 = 7 * SECONDS_PER_DAY;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    /// MAPE skips entries with `|y| <= mape_floor`.
    pub mape_floor: f64,
    /// When false, every entry counts regardless of the observation mask.
    pub use_mask: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { mape_floor: 1e-3, use_mask: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent. `None` when every valid entry falls under the floor.
    pub mape: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    /// `None` when the horizon has no valid entries.
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub horizons: Vec<HorizonMetrics>,
}

impl MetricReport {
    pub fn get(&self, horizon: usize) -> Option<&Metrics> {
        self.horizons.iter().find(|h| h.horizon == horizon).and_then(|h| h.metrics.as_ref())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Accumulator {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
    ape_count: usize,
}

impl Accumulator {
    fn push(&mut self, pred: f64, truth: f64, floor: f64) {
        let err = pred - truth;
        self.abs += err.abs();
        self.sq += err * err;
        self.count += 1;
        if truth.abs() > floor {
            self.ape += (err / truth).abs();
            self.ape_count += 1;
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.ape += other.ape;
        self.count += other.count;
        self.ape_count += other.ape_count;
    }

    fn finish(&self) -> Option<Metrics> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let mae = self.abs / n;
        // Rounding can put sqrt(mean sq) a hair under mae when all errors are equal.
        let rmse = (self.sq / n).sqrt().max(mae);
        let mape = (self.ape_count > 0).then(|| 100.0 * self.ape / self.ape_count as f64);
        Some(Metrics { mae, rmse, mape, count: self.count })
    }
}

/// Per-step accumulators for one forecast window.
fn window_accumulators(
    pred: &[f64],
    truth: &[f64],
    mask: &[bool],
    output_steps: usize,
    options: MetricOptions,
) -> Result<Vec<Accumulator>> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::Data(format!(
            "metric inputs differ in length: prediction {}, truth {}, mask {}",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    if output_steps == 0 || pred.len() % output_steps != 0 {
        return Err(Error::Data(format!("{} values do not split into {output_steps} steps", pred.len())));
    }
    let per_step = pred.len() / output_steps;
    let mut acc = vec![Accumulator::default(); output_steps];
    for (step, a) in acc.iter_mut().enumerate() {
        let range = step * per_step..(step + 1) * per_step;
        for k in range {
            if !options.use_mask || mask[k] {
                a.push(pred[k], truth[k], options.mape_floor);
            }
        }
    }
    Ok(acc)
}

fn check_horizons(horizons: &[usize], output_steps: usize) -> Result<()> {
    for &h in horizons {
        if h == 0 || h > output_steps {
            return Err(Error::Config(format!("horizon {h} is outside 1..={output_steps}")));
        }
    }
    Ok(())
}

/// Metrics for one `[step][node][feature]` forecast array; horizon `h`
/// reads step `h − 1`.
pub fn metrics(
    pred: &[f64],
    truth: &[f64],
    mask: &[bool],
    output_steps: usize,
    horizons: &[usize],
    options: MetricOptions,
) -> Result<MetricReport> {
    check_horizons(horizons, output_steps)?;
    let acc = window_accumulators(pred, truth, mask, output_steps, options)?;
    Ok(report_from(&acc, horizons))
}

fn report_from(acc: &[Accumulator], horizons: &[usize]) -> MetricReport {
    MetricReport {
        horizons: horizons.iter().map(|&h| HorizonMetrics { horizon: h, metrics: acc[h - 1].finish() }).collect(),
    }
}

/// Anything that maps an input window to an original-unit forecast laid out
/// like `Sample::y`.
pub trait Forecaster: Sync {
    fn forecast(&self, sample: &Sample) -> Result<Vec<f64>>;
}

/// Forecasts every sample (in parallel) and accumulates metrics in sample
/// order.
pub fn evaluate_forecaster(
    forecaster: &dyn Forecaster,
    samples: &[Sample],
    horizons: &[usize],
    options: MetricOptions,
) -> Result<MetricReport> {
    let first = samples.first().ok_or_else(|| Error::Data("no samples to evaluate".into()))?;
    let output_steps = first.output_steps;
    check_horizons(horizons, output_steps)?;
    let per_sample: Vec<Vec<Accumulator>> = samples
        .par_iter()
        .map(|s| {
            let pred = forecaster.forecast(s)?;
            window_accumulators(&pred, &s.y, &s.y_mask, output_steps, options)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![Accumulator::default(); output_steps];
    for acc in &per_sample {
        for (t, a) in total.iter_mut().zip(acc) {
            t.merge(a);
        }
    }
    Ok(report_from(&total, horizons))
}

/// Pools every output step of every sample into one set of metrics.
pub fn pooled_metrics(
    forecaster: &dyn Forecaster,
    samples: &[Sample],
    options: MetricOptions,
) -> Result<Option<Metrics>> {
    let per_sample: Vec<Vec<Accumulator>> = samples
        .par_iter()
        .map(|s| {
            let pred = forecaster.forecast(s)?;
            window_accumulators(&pred, &s.y, &s.y_mask, 1, options)
        })
        .collect::<Result<_>>()?;
    let mut total = Accumulator::default();
    for acc in &per_sample {
        total.merge(&acc[0]);
    }
    Ok(total.finish())
}

/// Slot-mean baseline over the training series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoricalAverage {
    period_secs: i64,
    interval_secs: i64,
    n_nodes: usize,
    n_features: usize,
    /// `[slot][node][feature]`; `None` for empty slots.
    slots: Vec<Option<f64>>,
    /// `[node][feature]` fallback.
    node_means: Vec<f64>,
}

impl HistoricalAverage {
    /// Time-of-week slots when the series spans at least a week, otherwise
    /// time-of-day slots.
    pub fn fit(train: &TrafficSeries) -> Result<Self> {
        let interval = train.interval_secs as i64;
        if interval <= 0 {
            return Err(Error::Data("series interval must be positive".into()));
        }
        let span = train.n_steps() as i64 * interval;
        let period = if span >= SECONDS_PER_WEEK { SECONDS_PER_WEEK } else { SECONDS_PER_DAY };
        if period % interval != 0 {
            return Err(Error::Data(format!("interval {interval}s does not divide the {period}s period")));
        }
        let n_slots = (period / interval) as usize;
        let (n, f) = (train.n_nodes(), train.n_features());
        let mut sum = vec![0.0; n_slots * n * f];
        let mut cnt = vec![0usize; n_slots * n * f];
        let mut node_sum = vec![0.0; n * f];
        let mut node_cnt = vec![0usize; n * f];
        for step in 0..train.n_steps() {
            let slot = slot_of(train.timestamp(step), period, interval);
            for i in 0..n {
                for k in 0..f {
                    if train.observed(step, i, k) {
                        let v = train.value(step, i, k);
                        sum[(slot * n + i) * f + k] += v;
                        cnt[(slot * n + i) * f + k] += 1;
                        node_sum[i * f + k] += v;
                        node_cnt[i * f + k] += 1;
                    }
                }
            }
        }
        let slots = sum.iter().zip(&cnt).map(|(s, &c)| (c > 0).then(|| s / c as f64)).collect();
        let node_means = node_sum.iter().zip(&node_cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
        Ok(Self { period_secs: period, interval_secs: interval, n_nodes: n, n_features: f, slots, node_means })
    }

    pub fn period_secs(&self) -> i64 {
        self.period_secs
    }

    /// `[node][feature]` prediction at one timestamp.
    pub fn predict_at(&self, ts: i64) -> Vec<f64> {
        let slot = slot_of(ts, self.period_secs, self.interval_secs);
        let per = self.n_nodes * self.n_features;
        (0..per).map(|k| self.slots[slot * per + k].unwrap_or(self.node_means[k])).collect()
    }

    /// Predictions for several timestamps, concatenated.
    pub fn predict(&self, timestamps: &[i64]) -> Vec<f64> {
        timestamps.iter().flat_map(|&t| self.predict_at(t)).collect()
    }
}

fn slot_of(ts: i64, period: i64, interval: i64) -> usize {
    (ts.rem_euclid(period) / interval) as usize
}

impl Forecaster for HistoricalAverage {
    fn forecast(&self, sample: &Sample) -> Result<Vec<f64>> {
        if sample.n_nodes != self.n_nodes || sample.n_features != self.n_features {
            return Err(Error::Data("sample shape does not match the historical average".into()));
        }
        let ts: Vec<i64> = (0..sample.output_steps).map(|h| sample.target_timestamp(h)).collect();
        Ok(self.predict(&ts))
    }
}

/// Machine-readable evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub config_hash: String,
    pub n_samples: usize,
    pub horizons: Vec<HorizonMetrics>,
    /// Excluded from equality-sensitive comparisons by callers.
    pub wall_seconds: f64,
}

impl EvalReport {
    pub fn metric_report(&self) -> MetricReport {
        MetricReport { horizons: self.horizons.clone() }
    }
}

/// Fixed-width table with one row per horizon and MAE/RMSE/MAPE columns per
/// model. Reports are expected to share their horizon list.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else { return out };
    let width = reports.iter().map(|r| r.model.len()).max().unwrap_or(0).max(26);
    let _ = write!(out, "{:<8}", "horizon");
    for r in reports {
        let _ = write!(out, " | {:^width$}", r.model);
    }
    out.push('\n');
    let _ = write!(out, "{:<8}", "");
    for _ in reports {
        let _ = write!(out, " | {:>w$} {:>8} {:>8}", "MAE", "RMSE", "MAPE%", w = width - 18);
    }
    out.push('\n');
    for (k, h) in first.horizons.iter().enumerate() {
        let _ = write!(out, "{:<8}", h.horizon);
        for r in reports {
            match r.horizons.get(k).and_then(|x| x.metrics.as_ref()) {
                Some(m) => {
                    let mape = m.mape.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
                    let _ = write!(out, " | {:>w$.4} {:>8.4} {:>8}", m.mae, m.rmse, mape, w = width - 18);
                }
                None => {
                    let _ = write!(out, " | {:>w$} {:>8} {:>8}", "-", "-", "-", w = width - 18);
                }
            }
        }
        out.push('\n');
    }
    out
}
