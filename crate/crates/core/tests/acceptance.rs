//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! Failures make the process exit nonzero only with `COOL_ACCEPTANCE_STRICT=1`,
//! so the rest of `cargo test` still runs. Positional arguments filter
//! criteria by substring.

use cool::dataset_io::{
    generate_synthetic, prepare, LagPair, PreparedData, RoadGraph, Sample, SyntheticSpec, TrafficSeries,
};
use cool::decoder_attention::{rank_branch, scale_branch, RankBranchParams, ScaleBranchParams};
use cool::encoder_posterior::{
    build_pair, correlation_loss, off_diagonal_mask, posterior_update, record_posterior, AffinityPenaltyPair,
    ScoringParams,
};
use cool::evaluation::{
    evaluate_forecaster, metrics, pooled_metrics, HistoricalAverage, MetricOptions, MetricReport, Metrics,
};
use cool::params::ParamGroup;
use cool::tape::Tape;
use cool::training::ModelForecaster;
use cool::{Checkpoint, Component, Matrix, Model, ModelParams, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// State shared between the training criteria.
#[derive(Default)]
struct Shared {
    data: Option<(TrafficSeries, RoadGraph, PreparedData)>,
    /// Pooled test MAE of the full model per seed, with wall time.
    full_runs: Vec<(u64, f64, Duration, MetricReport)>,
    reports: Vec<(String, MetricReport)>,
}

impl Shared {
    fn data(&mut self) -> &(TrafficSeries, RoadGraph, PreparedData) {
        self.data.get_or_insert_with(|| {
            let (series, graph) = generate_synthetic(&SyntheticSpec::default(), 0).expect("synthetic data");
            let cfg = TrainConfig::tiny();
            let data = prepare(&series, cfg.input_steps, cfg.output_steps, cfg.split(), 1, 1).expect("windows");
            (series, graph, data)
        })
    }
}

type Criterion = fn(&mut Shared) -> Outcome;

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Criterion); 11] = [
        ("posterior_closed_form", posterior_closed_form),
        ("affinity_penalty_algebra", affinity_penalty_algebra),
        ("posterior_improves_objective", posterior_improves_objective),
        ("attention_contracts", attention_contracts),
        ("fusion_coefficients", fusion_coefficients),
        ("end_to_end_gradient", end_to_end_gradient),
        ("memorize_one_sample", memorize_one_sample),
        ("synthetic_beats_historical_average", synthetic_beats_historical_average),
        ("ablations_do_not_help", ablations_do_not_help),
        ("metric_examples", metric_examples),
        ("reproducible_runs", reproducible_runs),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = run(&mut shared);
        ran += 1;
        if !out.pass {
            failed += 1;
        }
        println!(
            "{} {name} ({:.1}s): {}",
            if out.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            out.detail
        );
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        println!("ACCEPTANCE INCOMPLETE: {failed} criteria failed");
        if std::env::var_os("COOL_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}

// ---------------------------------------------------------------- posterior

fn random_instance(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> (Matrix, ScoringParams) {
    let h = Matrix::from_fn(rows, d, |_, _| rng.random_range(-1.0..1.0));
    let w = Matrix::from_fn(1, d, |_, _| rng.random_range(0.1..2.0));
    (h, ScoringParams { w })
}

/// Per-vertex loop written from the definition.
fn posterior_oracle(h: &Matrix, w: &[f64]) -> Matrix {
    let n = h.rows();
    let d = h.cols();
    let wcos = |a: &[f64], b: &[f64]| {
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for k in 0..d {
            let (x, y) = (a[k] * w[k], b[k] * w[k]);
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
        ab / (aa.sqrt() * bb.sqrt())
    };
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let mut raw = h.row(i).to_vec();
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = wcos(h.row(i), h.row(j));
            let (aff, pen) = (s.max(0.0), (-s).max(0.0));
            for k in 0..d {
                raw[k] += aff * h[(j, k)] - pen * h[(j, k)];
            }
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for k in 0..d {
            out[(i, k)] = raw[k] / norm;
        }
    }
    out
}

fn tape_posterior(h: &Matrix, params: &ScoringParams) -> Matrix {
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let wv = tape.leaf(params.w.clone());
    let mask = Arc::new(off_diagonal_mask(h.rows()));
    let trace = record_posterior(&mut tape, hv, wv, &mask, 0, false).expect("posterior");
    tape.value(trace.posterior).clone()
}

fn posterior_closed_form(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, n, r) = (8, 4, 6);
    let (mut norm_err, mut vec_err, mut tape_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (h, params) = random_instance(&mut rng, n * r, d);
        let pair = build_pair(&h, &params).expect("pair");
        let u = posterior_update(&h, &pair).expect("posterior");
        let oracle = posterior_oracle(&h, params.w.row(0));
        let via_tape = tape_posterior(&h, &params);
        for i in 0..u.rows() {
            let norm = u.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            norm_err = norm_err.max((norm - 1.0).abs());
        }
        vec_err = vec_err.max(u.max_abs_diff(&oracle));
        tape_err = tape_err.max(via_tape.max_abs_diff(&oracle));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        norm_err < 1e-6 && vec_err < 1e-10 && tape_err < 1e-10 && secs < 30.0,
        format!("1000 instances, |‖u‖−1| {norm_err:.1e}, closed form vs loop {vec_err:.1e}, training path vs loop {tape_err:.1e}, {secs:.2}s"),
    )
}

fn affinity_penalty_algebra(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut bad = Vec::new();
    let mut nonzero_penalty = 0;
    for inst in 0..1000 {
        let n = rng.random_range(2..30);
        let d = rng.random_range(1..10);
        let (h, params) = random_instance(&mut rng, n, d);
        let AffinityPenaltyPair { w_hat, p_hat } = build_pair(&h, &params).expect("pair");
        if p_hat.as_slice().iter().any(|v| *v > 0.0) {
            nonzero_penalty += 1;
        }
        for i in 0..n {
            for j in 0..n {
                let (w, p) = (w_hat[(i, j)], p_hat[(i, j)]);
                let ok = w * p == 0.0
                    && w >= 0.0
                    && p >= 0.0
                    && w == w_hat[(j, i)]
                    && p == p_hat[(j, i)]
                    && (i != j || (w == 0.0 && p == 0.0));
                if !ok && bad.len() < 3 {
                    bad.push(format!("instance {inst} at ({i},{j})"));
                }
            }
        }
    }
    outcome(
        bad.is_empty() && nonzero_penalty > 0,
        if bad.is_empty() {
            format!("1000 instances, disjoint supports, nonnegative, symmetric, empty diagonal ({nonzero_penalty} with penalties)")
        } else {
            format!("violations: {}", bad.join(", "))
        },
    )
}

/// Projected gradient descent on the unit sphere, row by row, as an
/// independent minimizer of the same objective.
fn projected_descent(h: &Matrix, pair: &AffinityPenaltyPair, beta: f64, start: &Matrix) -> Matrix {
    let (n, d) = h.shape();
    let mut u = start.clone();
    for i in 0..n {
        let mut target = vec![0.0; d];
        let mut mass = beta;
        for j in 0..n {
            let c = pair.w_hat[(i, j)] - pair.p_hat[(i, j)];
            mass += c;
            for k in 0..d {
                target[k] += c * h[(j, k)];
            }
        }
        for k in 0..d {
            target[k] += beta * h[(i, k)];
        }
        let lr = 0.5 / (mass.abs() + 1.0);
        for _ in 0..2000 {
            let row = u.row_mut(i);
            for k in 0..d {
                let grad = 2.0 * (mass * row[k] - target[k]);
                row[k] -= lr * grad;
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    u
}

fn posterior_improves_objective(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let beta = TrainConfig::default().beta;
    let (mut improved, mut descent_agrees) = (0, 0);
    for _ in 0..100 {
        let (h, params) = random_instance(&mut rng, 24, 8);
        let pair = build_pair(&h, &params).expect("pair");
        let u = posterior_update(&h, &pair).expect("posterior");
        let mut baseline = h.clone();
        for i in 0..h.rows() {
            let norm = h.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            baseline.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
        let ours = correlation_loss(&u, &h, &pair, beta);
        if ours <= correlation_loss(&baseline, &h, &pair, beta) + 1e-12 {
            improved += 1;
        }
        let descent = projected_descent(&h, &pair, beta, &baseline);
        if ours <= correlation_loss(&descent, &h, &pair, beta) + 1e-9 {
            descent_agrees += 1;
        }
    }
    outcome(
        improved >= 95,
        format!("objective not worse than normalized prior on {improved}/100; not worse than projected descent on {descent_agrees}/100"),
    )
}

// ----------------------------------------------------------------- decoder

fn rows_sum_to_one(m: &Matrix) -> f64 {
    (0..m.rows()).map(|i| (m.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn attention_contracts(shared: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (t, d) = (12, 16);
    let mut problems = Vec::new();
    let mut worst = 0.0f64;
    for &f in &[3usize, 4, 6] {
        let u = Matrix::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0));
        let rank = RankBranchParams::init(t, f, d, 0.01, &mut rng).expect("rank params");
        let out = rank_branch(&u, &rank).expect("rank branch");
        if out.scores.shape() != (t, t / f) {
            problems.push(format!("rank {f} scores {:?}", out.scores.shape()));
        }
        worst = worst.max(rows_sum_to_one(&out.scores));
        let scale = ScaleBranchParams::init(t, f, d, &mut rng).expect("scale params");
        let out = scale_branch(&u, &scale).expect("scale branch");
        if out.scores.shape() != (t / f, t / f) {
            problems.push(format!("window {f} scores {:?}", out.scores.shape()));
        }
        worst = worst.max(rows_sum_to_one(&out.scores));
    }
    // The same contracts inside the full model, stacked over nodes.
    let (_, graph, data) = shared.data();
    let cfg = TrainConfig::tiny();
    let model = Model::new(&cfg, graph, data.normalizer.clone()).expect("model");
    let params = model.init_params(&mut rng).expect("params");
    let ins = model.inspect(&params, &data.train[0]).expect("inspect");
    let n = model.n_nodes();
    for (mu, s) in &ins.rank_scores {
        if s.shape() != (n * t, t / mu) {
            problems.push(format!("model rank {mu} scores {:?}", s.shape()));
        }
        worst = worst.max(rows_sum_to_one(s));
    }
    for (eps, s) in &ins.scale_scores {
        if s.shape() != (n * (t / eps), t / eps) {
            problems.push(format!("model window {eps} scores {:?}", s.shape()));
        }
        worst = worst.max(rows_sum_to_one(s));
    }
    outcome(
        problems.is_empty() && worst < 1e-9,
        if problems.is_empty() {
            format!("T=12, factors 3/4/6, max |row sum − 1| {worst:.1e}")
        } else {
            problems.join("; ")
        },
    )
}

fn fusion_coefficients(shared: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (_, graph, data) = shared.data();
    let sample = &data.train[0];
    let mut problems = Vec::new();
    let (mut checked, mut rejected) = (0, 0);
    for bits in 0u32..16 {
        let ablate: Vec<Component> =
            Component::ALL.iter().enumerate().filter(|(k, _)| bits & (1 << k) != 0).map(|(_, c)| *c).collect();
        let cfg = TrainConfig { ablate: ablate.clone(), ..TrainConfig::tiny() };
        let both = ablate.contains(&Component::MultiRank) && ablate.contains(&Component::MultiScale);
        let model = match Model::new(&cfg, graph, data.normalizer.clone()) {
            Ok(m) => m,
            Err(_) if both => {
                rejected += 1;
                continue;
            }
            Err(e) => {
                problems.push(format!("{ablate:?}: {e}"));
                continue;
            }
        };
        if both {
            problems.push(format!("{ablate:?} accepted with no branch"));
            continue;
        }
        let mut params = model.init_params(&mut rng).expect("params");
        params.fusion.logits.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        let c = model.inspect(&params, sample).expect("inspect").fusion_coeffs;
        let sum: f64 = c.iter().sum();
        if c.len() != cfg.n_active_branches() || c.iter().any(|v| !(*v > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            problems.push(format!("{ablate:?}: {c:?}"));
        }
        checked += 1;
    }
    outcome(
        problems.is_empty() && checked == 12 && rejected == 4,
        if problems.is_empty() {
            format!("{checked} subsets positive and summing to 1, {rejected} branchless subsets rejected")
        } else {
            problems.join("; ")
        },
    )
}

// --------------------------------------------------------------- training

fn sample_loss(model: &Model, params: &ModelParams, sample: &Sample) -> f64 {
    let (sum, count, _) = model.sample_gradient(params, sample).expect("loss");
    sum / count as f64
}

fn end_to_end_gradient(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec {
        n_nodes: 3,
        n_days: 1,
        lag_pairs: vec![LagPair { src: 0, dst: 2, lag: 3 }],
        ..SyntheticSpec::default()
    };
    let (series, graph) = generate_synthetic(&spec, 3).expect("synthetic");
    let cfg = TrainConfig { d: 8, prior_layers: 2, head_hidden: 16, ..TrainConfig::tiny() };
    let data = prepare(&series, 12, 12, cfg.split(), 1, 1).expect("windows");
    let model = Model::new(&cfg, &graph, data.normalizer.clone()).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut params = model.init_params(&mut rng).expect("params");
    params.scoring.w.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
    params.fusion.logits.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let sample = &data.train[40];

    let (_, count, analytic) = model.sample_gradient(&params, sample).expect("gradient");
    let scale = 1.0 / count as f64;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let h = 1e-5;
    // Squared norms of (analytic − numeric, analytic, numeric) per group.
    let mut groups: Vec<(String, [f64; 3])> = Vec::new();
    for (t, name) in names.iter().enumerate() {
        let group = name.split('.').next().unwrap_or(name).to_string();
        if groups.last().map(|g| &g.0) != Some(&group) {
            groups.push((group, [0.0; 3]));
        }
        let acc = &mut groups.last_mut().expect("group").1;
        for (e, a) in analytic[t].as_slice().iter().enumerate() {
            let shifted = |delta: f64| {
                let mut p = params.clone();
                let mut k = 0;
                p.visit_mut(&mut |m| {
                    if k == t {
                        m.as_mut_slice()[e] += delta;
                    }
                    k += 1;
                });
                sample_loss(&model, &p, sample)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let a = a * scale;
            acc[0] += (a - numeric).powi(2);
            acc[1] += a * a;
            acc[2] += numeric * numeric;
        }
    }
    let mut worst = (0.0f64, String::new());
    for (group, [diff, a, n]) in &groups {
        let rel = diff.sqrt() / a.sqrt().max(n.sqrt()).max(1e-12);
        if rel >= worst.0 {
            worst = (rel, group.clone());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-3 && secs < 300.0,
        format!("{} groups, worst relative error {:.2e} ({}), {secs:.1}s", groups.len(), worst.0, worst.1),
    )
}

fn memorize_one_sample(shared: &mut Shared) -> Outcome {
    let (_, graph, data) = shared.data();
    let cfg = TrainConfig { learning_rate: 0.01, ..TrainConfig::tiny() };
    let mut trainer = Trainer::new(&cfg, graph, data.normalizer.clone()).expect("trainer");
    let sample = &data.train[0];
    let mut best = f64::INFINITY;
    let mut reached = None;
    for step in 0..200 {
        trainer.step(&[sample], step).expect("step");
        let loss = sample_loss(trainer.model(), trainer.params(), sample);
        best = best.min(loss);
        if loss < 0.01 && reached.is_none() {
            reached = Some(step + 1);
        }
    }
    outcome(
        reached.is_some(),
        format!(
            "lr {}, best normalized MAE {best:.4} over 200 steps{}",
            cfg.learning_rate,
            reached.map(|s| format!(", below 0.01 after {s}")).unwrap_or_default()
        ),
    )
}

fn run_config(shared: &mut Shared, cfg: &TrainConfig) -> (Checkpoint, f64, Duration, MetricReport) {
    let start = Instant::now();
    let (_, graph, data) = shared.data();
    let mut trainer = Trainer::new(cfg, graph, data.normalizer.clone()).expect("trainer");
    trainer.fit(&data.train, &data.val, |_, _| Ok(())).expect("fit");
    let best = trainer.checkpoint().best();
    let model = best.model(graph).expect("model");
    let f = ModelForecaster { model: &model, params: &best.params };
    let opts = MetricOptions::default();
    let report = evaluate_forecaster(&f, &data.test, &cfg.horizons, opts).expect("eval");
    let pooled = pooled_metrics(&f, &data.test, opts).expect("pooled").expect("observed targets").mae;
    let label = format!("cool seed {} ablate {:?}", cfg.seed, cfg.ablate);
    shared.reports.push((label, report.clone()));
    (best, pooled, start.elapsed(), report)
}

fn full_run(shared: &mut Shared, seed: u64) -> (f64, Duration, MetricReport) {
    if let Some((_, p, t, r)) = shared.full_runs.iter().find(|r| r.0 == seed) {
        return (*p, *t, r.clone());
    }
    let cfg = TrainConfig { epochs: 30, seed, ..TrainConfig::tiny() };
    let (_, pooled, t, report) = run_config(shared, &cfg);
    shared.full_runs.push((seed, pooled, t, report.clone()));
    (pooled, t, report)
}

/// Ridge regression from every input reading to each node's value at the
/// last horizon, in normalized units.
fn linear_readout_mae(data: &PreparedData) -> f64 {
    let s0 = &data.train[0];
    let (n, f, t_in, t_out) = (s0.n_nodes, s0.n_features, s0.input_steps, s0.output_steps);
    let p = t_in * n * f + 1;
    let norm = &data.normalizer;
    let features = |s: &Sample| {
        let mut x: Vec<f64> = s.x.iter().enumerate().map(|(k, v)| norm.normalize(*v, k % f)).collect();
        x.push(1.0);
        x
    };
    let target = |s: &Sample, node: usize| s.y[s.offset(t_out - 1, node, 0)];
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p * n];
    for s in &data.train {
        let x = features(s);
        for i in 0..p {
            for j in 0..p {
                a[i * p + j] += x[i] * x[j];
            }
            for node in 0..n {
                b[i * n + node] += x[i] * norm.normalize(target(s, node), 0);
            }
        }
    }
    for i in 0..p {
        a[i * p + i] += 1e-3 * data.train.len() as f64;
    }
    // Cholesky then two triangular solves per output column.
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = if i == j { s.sqrt() } else { s / l[j * p + j] };
        }
    }
    let mut coef = vec![0.0; p * n];
    for node in 0..n {
        let mut y: Vec<f64> = (0..p).map(|i| b[i * n + node]).collect();
        for i in 0..p {
            for k in 0..i {
                y[i] -= l[i * p + k] * y[k];
            }
            y[i] /= l[i * p + i];
        }
        for i in (0..p).rev() {
            for k in (i + 1)..p {
                y[i] -= l[k * p + i] * y[k];
            }
            y[i] /= l[i * p + i];
        }
        for i in 0..p {
            coef[i * n + node] = y[i];
        }
    }
    let (mut abs, mut count) = (0.0, 0);
    for s in &data.test {
        let x = features(s);
        for node in 0..n {
            if !s.y_mask[s.offset(t_out - 1, node, 0)] {
                continue;
            }
            let z: f64 = (0..p).map(|i| x[i] * coef[i * n + node]).sum();
            abs += (norm.denormalize(z, 0) - target(s, node)).abs();
            count += 1;
        }
    }
    abs / count as f64
}

fn synthetic_beats_historical_average(shared: &mut Shared) -> Outcome {
    let (series, _, data) = shared.data();
    let ha = HistoricalAverage::fit(&series.head(data.train_steps).expect("train span")).expect("baseline");
    let horizons = [3, 6, 12];
    let ha_report = evaluate_forecaster(&ha, &data.test, &horizons, MetricOptions::default()).expect("eval");
    let ridge = linear_readout_mae(data);
    shared.reports.push(("historical_average".into(), ha_report.clone()));
    let (_, wall, report) = full_run(shared, 0);
    let mae = |r: &MetricReport, h: usize| r.get(h).map(|m| m.mae).unwrap_or(f64::NAN);
    let ratio = mae(&report, 12) / mae(&ha_report, 12);
    outcome(
        ratio <= 0.7 && wall.as_secs_f64() < 600.0,
        format!(
            "MAE h3/h6/h12 cool {:.4}/{:.4}/{:.4}, historical average {:.4}/{:.4}/{:.4}, ratio at h12 {ratio:.3}, ridge readout h12 {ridge:.4}, training {:.0}s",
            mae(&report, 3),
            mae(&report, 6),
            mae(&report, 12),
            mae(&ha_report, 3),
            mae(&ha_report, 6),
            mae(&ha_report, 12),
            wall.as_secs_f64()
        ),
    )
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

fn ablations_do_not_help(shared: &mut Shared) -> Outcome {
    let seeds = [0u64, 1, 2];
    let full: Vec<f64> = seeds.iter().map(|&s| full_run(shared, s).0).collect();
    let (fm, fs) = mean_std(&full);
    let mut parts = vec![format!("full {fm:.4}±{fs:.4}")];
    let mut pass = true;
    for c in Component::ALL {
        let runs: Vec<f64> = seeds
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig { epochs: 30, seed, ablate: vec![c], ..TrainConfig::tiny() };
                run_config(shared, &cfg).1
            })
            .collect();
        let (m, _) = mean_std(&runs);
        let ok = m >= fm - fs;
        pass &= ok;
        parts.push(format!("no {c} {m:.4}{}", if ok { "" } else { " (better than full)" }));
    }
    outcome(pass, format!("pooled test MAE over 3 seeds: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- metrics

fn close(m: &Metrics, mae: f64, rmse: f64, mape: Option<f64>) -> bool {
    let tol = 1e-9;
    (m.mae - mae).abs() < tol
        && (m.rmse - rmse).abs() < tol
        && match (m.mape, mape) {
            (Some(a), Some(b)) => (a - b).abs() < tol,
            (None, None) => true,
            _ => false,
        }
}

fn metric_examples(shared: &mut Shared) -> Outcome {
    let opts = MetricOptions::default();
    let mut problems = Vec::new();
    // Two steps, two nodes, one feature: [step][node].
    let pred = [1.0, 2.0, 3.0, 4.0];
    let truth = [1.0, 3.0, 5.0, 2.0];
    let all = [true; 4];
    let r = metrics(&pred, &truth, &all, 2, &[1, 2], opts).expect("metrics");
    if !close(r.get(1).unwrap(), 0.5, 0.5f64.sqrt(), Some(100.0 / 6.0)) {
        problems.push(format!("h1 {:?}", r.get(1)));
    }
    if !close(r.get(2).unwrap(), 2.0, 2.0, Some(70.0)) {
        problems.push(format!("h2 {:?}", r.get(2)));
    }
    let masked = [true, true, true, false];
    let r = metrics(&pred, &truth, &masked, 2, &[2], opts).expect("metrics");
    if !close(r.get(2).unwrap(), 2.0, 2.0, Some(40.0)) {
        problems.push(format!("masked h2 {:?}", r.get(2)));
    }
    // A zero target is skipped by MAPE alone.
    let r = metrics(&[1.0, 2.0], &[0.0, 4.0], &[true, true], 1, &[1], opts).expect("metrics");
    if !close(r.get(1).unwrap(), 1.5, 2.5f64.sqrt(), Some(50.0)) {
        problems.push(format!("floor {:?}", r.get(1)));
    }
    let mut reports = 0;
    for (label, report) in &shared.reports {
        for h in &report.horizons {
            if let Some(m) = &h.metrics {
                reports += 1;
                if m.rmse < m.mae {
                    problems.push(format!("{label} h{}: rmse {} < mae {}", h.horizon, m.rmse, m.mae));
                }
            }
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("hand examples within 1e-9, RMSE ≥ MAE on {reports} reported horizons")
        } else {
            problems.join("; ")
        },
    )
}

fn reproducible_runs(shared: &mut Shared) -> Outcome {
    let cfg = TrainConfig { epochs: 2, train_stride: 6, seed: 5, ..TrainConfig::tiny() };
    let restored = TrainConfig::from_toml(&cfg.to_toml()).expect("manifest config");
    if restored != cfg {
        return outcome(false, "config does not survive the manifest round trip".into());
    }
    let (a, _, _, ra) = run_config(shared, &cfg);
    let (b, _, _, rb) = run_config(shared, &restored);
    let same_bytes = a.to_bytes().expect("bytes") == b.to_bytes().expect("bytes");
    outcome(
        ra == rb && same_bytes,
        format!("reports identical: {}, checkpoints byte-identical: {same_bytes}", ra == rb),
    )
}
