use crate::settings::{
    apply_overrides, from_table, overlay, parse_horizons, read_config_file, to_table, write_manifest,
};
use crate::svg;
use cool::dataset_io::{
    generate_synthetic, load_adjacency, load_readings, prepare, write_adjacency, write_readings_binary,
    write_readings_text, PreparedData, RoadGraph, Sample, SyntheticSpec, TrafficSeries,
};
use cool::error::{Error, Result};
use cool::evaluation::{evaluate_forecaster, format_table, EvalReport, HistoricalAverage, MetricOptions};
use cool::training::{Checkpoint, EpochRecord, ModelForecaster, Trainer};
use cool::{Component, Model, TrainConfig};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use toml::{Table, Value};

#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct SynthArgs {
    pub common: Common,
    pub seed: Option<u64>,
    pub nodes: Option<usize>,
    pub days: Option<usize>,
    pub binary: bool,
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut table = to_table(&SyntheticSpec::default())?;
    let mut seed = None;
    if let Some(path) = &args.common.config {
        let (file, s) = read_config_file(path)?;
        overlay(&mut table, file);
        seed = s;
    }
    apply_overrides(&mut table, &args.common.set)?;
    if let Some(n) = args.nodes {
        table.insert("n_nodes".into(), Value::Integer(n as i64));
    }
    if let Some(d) = args.days {
        table.insert("n_days".into(), Value::Integer(d as i64));
    }
    let explicit_pairs = table.get("lag_pairs") != to_table(&SyntheticSpec::default())?.get("lag_pairs");
    let mut spec: SyntheticSpec = from_table(&table)?;
    if !explicit_pairs {
        // Default lag pairs that name missing sensors are dropped rather than rejected.
        let n = spec.n_nodes;
        spec.lag_pairs.retain(|p| p.src < n && p.dst < n);
        if spec.lag_pairs.len() < SyntheticSpec::default().lag_pairs.len() {
            log::warn!("dropped default lag pairs outside {n} nodes");
        }
    }
    spec.validate()?;
    let seed = args.seed.or(seed).unwrap_or(0);
    let (series, graph) = generate_synthetic(&spec, seed)?;

    let out = &args.common.out;
    ensure_dir(out)?;
    write_adjacency(&out.join("adjacency.csv"), &graph)?;
    let readings = if args.binary { out.join("readings.bin") } else { out.join("readings.csv") };
    if args.binary {
        write_readings_binary(&readings, &series)?;
    } else {
        write_readings_text(&readings, &graph, &series)?;
    }
    write_manifest(out, "synth", seed, &spec, Table::new())?;
    println!(
        "synthetic dataset: {} nodes, {} steps of {} min, {} edges, seed {seed}",
        graph.n_nodes(),
        series.n_steps(),
        spec.interval_minutes,
        graph.nnz()
    );
    for p in &spec.lag_pairs {
        println!("  lag pair {} -> {} by {} steps", graph.node_ids()[p.src], graph.node_ids()[p.dst], p.lag);
    }
    println!("wrote {} and {}", readings.display(), out.join("adjacency.csv").display());
    Ok(())
}

fn load_data(config: &TrainConfig) -> Result<(RoadGraph, TrafficSeries)> {
    let need = |v: &Option<String>, key: &str| {
        v.clone().ok_or_else(|| Error::Config(format!("no `{key}` path given; pass --{key} or set {key}=PATH")))
    };
    let adjacency = need(&config.adjacency, "adjacency")?;
    let readings = need(&config.readings, "readings")?;
    let graph = load_adjacency(Path::new(&adjacency))?;
    let series = load_readings(Path::new(&readings), &graph, config.readings_options())?;
    Ok((graph, series))
}

fn prepare_for(config: &TrainConfig, series: &TrafficSeries) -> Result<PreparedData> {
    prepare(series, config.input_steps, config.output_steps, config.split(), config.train_stride, config.eval_stride)
}

fn pick<'a>(data: &'a PreparedData, split: Split) -> &'a [Sample] {
    match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
        Split::Test => &data.test,
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub common: Common,
    pub profile: Option<String>,
    pub ablate: Vec<Component>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub readings: Option<String>,
    pub adjacency: Option<String>,
    pub resume: Option<PathBuf>,
}

pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let base = TrainConfig::profile(args.profile.as_deref().unwrap_or("default"))?;
    let mut table = to_table(&base)?;
    if let Some(path) = &args.common.config {
        let (file, seed) = read_config_file(path)?;
        overlay(&mut table, file);
        if let Some(s) = seed {
            table.insert("seed".into(), Value::Integer(s as i64));
        }
    }
    apply_overrides(&mut table, &args.common.set)?;
    let mut config: TrainConfig = from_table(&table)?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if args.readings.is_some() {
        config.readings = args.readings.clone();
    }
    if args.adjacency.is_some() {
        config.adjacency = args.adjacency.clone();
    }
    for c in &args.ablate {
        if !config.ablate.contains(c) {
            config.ablate.push(*c);
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let out = &args.common.out;
    let started = Instant::now();
    let (mut trainer, config, graph, data) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut config = ckpt.config.clone();
            if let Some(e) = args.epochs {
                config.epochs = e;
            }
            if args.readings.is_some() {
                config.readings = args.readings.clone();
            }
            if args.adjacency.is_some() {
                config.adjacency = args.adjacency.clone();
            }
            let (graph, series) = load_data(&config)?;
            let data = prepare_for(&config, &series)?;
            let trainer = Trainer::resume(ckpt, &graph, Some(config.epochs))?;
            println!("resuming after epoch {} of {}", trainer.epoch(), config.epochs);
            (trainer, config, graph, data)
        }
        None => {
            let config = resolve_train_config(args)?;
            let (graph, series) = load_data(&config)?;
            let data = prepare_for(&config, &series)?;
            let trainer = Trainer::new(&config, &graph, data.normalizer.clone())?;
            (trainer, config, graph, data)
        }
    };
    ensure_dir(out)?;
    write_manifest(out, "train", config.seed, &config, Table::new())?;
    println!(
        "training on {} nodes: {} train / {} val windows, {} parameters, ablate {:?}",
        graph.n_nodes(),
        data.train.len(),
        data.val.len(),
        cool::params::ParamGroup::n_scalars(trainer.params()),
        config.ablate.iter().map(|c| c.as_str()).collect::<Vec<_>>()
    );

    let log_path = out.join("train_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let (best_path, last_path) = (out.join("best.ckpt"), out.join("last.ckpt"));
    trainer.fit(&data.train, &data.val, |rec: &EpochRecord, t: &Trainer| {
        let line = serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        let ckpt = t.checkpoint();
        ckpt.save(&last_path)?;
        if ckpt.best_epoch == Some(rec.epoch) {
            ckpt.best().save(&best_path)?;
        }
        println!(
            "epoch {:>3}  train_mae {:.4}  val_mae {:.4}  val_rmse {:.4}  {:.1}s",
            rec.epoch, rec.train_mae, rec.val_mae, rec.val_rmse, rec.wall_seconds
        );
        Ok(())
    })?;
    if !last_path.exists() {
        trainer.checkpoint().save(&last_path)?;
    }
    println!(
        "done after epoch {}; best val MAE {} ({:.1}s). Checkpoints in {}",
        trainer.epoch(),
        trainer.best_val_mae().map_or("n/a".into(), |v| format!("{v:.4}")),
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

/// Keys that may change between training and evaluation.
const EVAL_KEYS: &[&str] = &[
    "horizons",
    "mask_metrics",
    "mape_floor",
    "readings",
    "adjacency",
    "eval_stride",
    "dataset",
    "mask_sentinel",
    "sentinel",
];

#[derive(Debug, Clone, Default)]
pub struct CheckpointArgs {
    pub common: Common,
    pub checkpoint: PathBuf,
    pub readings: Option<String>,
    pub adjacency: Option<String>,
    pub split: Option<Split>,
}

struct Loaded {
    ckpt: Checkpoint,
    config: TrainConfig,
    graph: RoadGraph,
    series: TrafficSeries,
    data: PreparedData,
    model: Model,
}

fn load_checkpoint(args: &CheckpointArgs, extra: &[(&str, Value)]) -> Result<Loaded> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut changes = Table::new();
    if let Some(path) = &args.common.config {
        overlay(&mut changes, read_config_file(path)?.0);
    }
    apply_overrides(&mut changes, &args.common.set)?;
    for (k, v) in extra {
        changes.insert((*k).into(), v.clone());
    }
    if let Some(r) = &args.readings {
        changes.insert("readings".into(), Value::String(r.clone()));
    }
    if let Some(a) = &args.adjacency {
        changes.insert("adjacency".into(), Value::String(a.clone()));
    }
    if let Some(bad) = changes.keys().find(|k| !EVAL_KEYS.contains(&k.as_str())) {
        return Err(Error::Config(format!(
            "`{bad}` is fixed by the checkpoint; only {} can change here",
            EVAL_KEYS.join(", ")
        )));
    }
    let mut table = to_table(&ckpt.config)?;
    overlay(&mut table, changes);
    let config: TrainConfig = from_table(&table)?;
    config.validate()?;
    let (graph, series) = load_data(&config)?;
    if series.n_features() != ckpt.normalizer.n_features() {
        return Err(Error::Data(format!(
            "normalizer mismatch: checkpoint has {} features, readings have {}",
            ckpt.normalizer.n_features(),
            series.n_features()
        )));
    }
    let data = prepare_for(&config, &series)?;
    if data.normalizer != ckpt.normalizer {
        log::warn!("readings give different normalization statistics than the checkpoint; using the checkpoint's");
    }
    let model = Model::new(&config, &graph, ckpt.normalizer.clone())?;
    if graph.node_ids() != ckpt.node_ids.as_slice() {
        return Err(Error::Data("graph nodes do not match the checkpoint".into()));
    }
    Ok(Loaded { ckpt, config, graph, series, data, model })
}

fn predictions(loaded: &Loaded, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples.par_iter().map(|s| loaded.model.predict(&loaded.ckpt.params, s)).collect()
}

fn predictions_csv(loaded: &Loaded, samples: &[Sample], preds: &[Vec<f64>]) -> String {
    let ids = loaded.graph.node_ids();
    let names = &loaded.series.feature_names;
    let mut s = String::from("window_start,target_time,step,node,feature,prediction,truth,observed\n");
    for (sample, pred) in samples.iter().zip(preds) {
        for t in 0..sample.output_steps {
            for i in 0..sample.n_nodes {
                for f in 0..sample.n_features {
                    let k = sample.offset(t, i, f);
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{},{}",
                        sample.window_start,
                        sample.target_timestamp(t),
                        t + 1,
                        ids[i],
                        names[f],
                        pred[k],
                        sample.y[k],
                        u8::from(sample.y_mask[k])
                    );
                }
            }
        }
    }
    s
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub inner: CheckpointArgs,
    pub horizons: Option<String>,
    pub save_predictions: bool,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(h) = &args.horizons {
        let hs = parse_horizons(h)?;
        extra.push(("horizons", Value::Array(hs.iter().map(|&v| Value::Integer(v as i64)).collect())));
    }
    let loaded = load_checkpoint(&args.inner, &extra)?;
    let config = &loaded.config;
    let split = args.inner.split.unwrap_or(Split::Test);
    let samples = pick(&loaded.data, split);
    let options = MetricOptions { mape_floor: config.mape_floor, use_mask: config.mask_metrics };
    let hash = loaded.ckpt.config.hash();

    let started = Instant::now();
    let forecaster = ModelForecaster { model: &loaded.model, params: &loaded.ckpt.params };
    let report = evaluate_forecaster(&forecaster, samples, &config.horizons, options)?;
    let cool_report = EvalReport {
        dataset: config.dataset.clone(),
        model: "cool".into(),
        config_hash: hash.clone(),
        n_samples: samples.len(),
        horizons: report.horizons,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let started = Instant::now();
    let ha = HistoricalAverage::fit(&loaded.series.head(loaded.data.train_steps)?)?;
    let ha_report = evaluate_forecaster(&ha, samples, &config.horizons, options)?;
    let ha_report = EvalReport {
        dataset: config.dataset.clone(),
        model: "historical_average".into(),
        config_hash: hash,
        n_samples: samples.len(),
        horizons: ha_report.horizons,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let reports = vec![cool_report, ha_report];

    let out = &args.inner.common.out;
    ensure_dir(out)?;
    let json = serde_json::to_string_pretty(&reports).map_err(|e| Error::Data(e.to_string()))?;
    write_file(&out.join("report.json"), &json)?;
    let table = format_table(&reports);
    write_file(&out.join("report.txt"), &table)?;
    if args.save_predictions {
        let preds = predictions(&loaded, samples)?;
        write_file(&out.join("predictions.csv"), &predictions_csv(&loaded, samples, &preds))?;
    }
    let mut extra = Table::new();
    extra.insert("checkpoint".into(), Value::String(args.inner.checkpoint.display().to_string()));
    write_manifest_with(out, "eval", config, extra)?;
    println!("{} split, {} windows", split_name(split), samples.len());
    print!("{table}");
    Ok(())
}

fn write_manifest_with(out: &Path, command: &str, config: &TrainConfig, extra: Table) -> Result<()> {
    write_manifest(out, command, config.seed, config, extra)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

#[derive(Debug, Clone, Default)]
pub struct PredictArgs {
    pub inner: CheckpointArgs,
    pub limit: Option<usize>,
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.inner, &[])?;
    let samples = pick(&loaded.data, args.inner.split.unwrap_or(Split::Test));
    let samples = &samples[..args.limit.unwrap_or(samples.len()).min(samples.len())];
    let preds = predictions(&loaded, samples)?;
    let out = &args.inner.common.out;
    ensure_dir(out)?;
    let path = out.join("predictions.csv");
    write_file(&path, &predictions_csv(&loaded, samples, &preds))?;
    let mut extra = Table::new();
    extra.insert("checkpoint".into(), Value::String(args.inner.checkpoint.display().to_string()));
    write_manifest_with(out, "predict", &loaded.config, extra)?;
    println!("wrote {} windows to {}", samples.len(), path.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    Prediction,
    Attention,
    Affinity,
}

#[derive(Debug, Clone)]
pub struct PlotArgs {
    pub inner: CheckpointArgs,
    pub kind: PlotKind,
    pub node: Option<String>,
    pub horizon: usize,
    pub feature: usize,
    pub sample: usize,
    pub limit: Option<usize>,
}

fn node_index(loaded: &Loaded, node: &Option<String>) -> Result<usize> {
    match node {
        None => Ok(0),
        Some(id) => {
            loaded.graph.index_of(id).ok_or_else(|| Error::Data(format!("sensor `{id}` is not in the dataset")))
        }
    }
}

pub fn plot(args: &PlotArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.inner, &[])?;
    let samples = pick(&loaded.data, args.inner.split.unwrap_or(Split::Test));
    let out = &args.inner.common.out;
    ensure_dir(out)?;
    let written = match args.kind {
        PlotKind::Prediction => plot_prediction(&loaded, samples, args, out)?,
        PlotKind::Attention => plot_attention(&loaded, samples, args, out)?,
        PlotKind::Affinity => plot_affinity(&loaded, samples, args, out)?,
    };
    let mut extra = Table::new();
    extra.insert("checkpoint".into(), Value::String(args.inner.checkpoint.display().to_string()));
    write_manifest_with(out, "plot", &loaded.config, extra)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn plot_prediction(loaded: &Loaded, samples: &[Sample], args: &PlotArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let node = node_index(loaded, &args.node)?;
    let c = &loaded.config;
    if args.horizon == 0 || args.horizon > c.output_steps {
        return Err(Error::Config(format!("horizon {} is outside 1..={}", args.horizon, c.output_steps)));
    }
    if args.feature >= loaded.series.n_features() {
        return Err(Error::Config(format!("feature {} does not exist", args.feature)));
    }
    let samples = &samples[..args.limit.unwrap_or(288).min(samples.len())];
    let preds = predictions(loaded, samples)?;
    let step = args.horizon - 1;
    let mut csv = String::from("window_start,target_time,truth,prediction,observed\n");
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for (s, p) in samples.iter().zip(&preds) {
        let k = s.offset(step, node, args.feature);
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            s.window_start,
            s.target_timestamp(step),
            s.y[k],
            p[k],
            u8::from(s.y_mask[k])
        );
        truth.push(if s.y_mask[k] { s.y[k] } else { f64::NAN });
        pred.push(p[k]);
    }
    let id = &loaded.graph.node_ids()[node];
    let svg = svg::line_chart(
        &format!("sensor {id}, horizon {}", args.horizon),
        &[
            svg::Line { label: "ground truth", color: "#222222", values: &truth },
            svg::Line { label: "prediction", color: "#d62728", values: &pred },
        ],
    );
    let (a, b) = (out.join("prediction.svg"), out.join("prediction.csv"));
    write_file(&a, &svg)?;
    write_file(&b, &csv)?;
    Ok(vec![a, b])
}

#[derive(serde::Serialize)]
struct AttentionBranch {
    kind: &'static str,
    size: usize,
    scores: Vec<Vec<f64>>,
}

#[derive(serde::Serialize)]
struct AttentionSidecar {
    node: String,
    window_start: usize,
    fusion: Vec<f64>,
    branches: Vec<AttentionBranch>,
}

fn plot_attention(loaded: &Loaded, samples: &[Sample], args: &PlotArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let node = node_index(loaded, &args.node)?;
    let sample = samples
        .get(args.sample)
        .ok_or_else(|| Error::Data(format!("sample {} is out of range ({} windows)", args.sample, samples.len())))?;
    let ins = loaded.model.inspect(&loaded.ckpt.params, sample)?;
    let t = loaded.config.input_steps;
    let block = |m: &cool::Matrix, rows: usize| -> Vec<Vec<f64>> {
        (node * rows..(node + 1) * rows).map(|r| m.row(r).to_vec()).collect()
    };
    let mut branches = Vec::new();
    for (mu, m) in &ins.rank_scores {
        branches.push(AttentionBranch { kind: "rank", size: *mu, scores: block(m, t) });
    }
    for (eps, m) in &ins.scale_scores {
        branches.push(AttentionBranch { kind: "scale", size: *eps, scores: block(m, t / eps) });
    }
    let id = loaded.graph.node_ids()[node].clone();
    let panels: Vec<(String, Vec<Vec<f64>>)> =
        branches.iter().map(|b| (format!("{} {}", b.kind, b.size), b.scores.clone())).collect();
    let svg = svg::heatmaps(&format!("attention scores, sensor {id}, window {}", sample.window_start), &panels);
    let side = AttentionSidecar { node: id, window_start: sample.window_start, fusion: ins.fusion_coeffs, branches };
    let (a, b) = (out.join("attention.svg"), out.join("attention.json"));
    write_file(&a, &svg)?;
    write_file(&b, &serde_json::to_string_pretty(&side).map_err(|e| Error::Data(e.to_string()))?)?;
    Ok(vec![a, b])
}

fn plot_affinity(loaded: &Loaded, samples: &[Sample], args: &PlotArgs, out: &Path) -> Result<Vec<PathBuf>> {
    if !loaded.config.enabled(Component::Posterior) {
        return Err(Error::Config(
            "the posterior stage is ablated in this checkpoint, so there is no affinity graph".into(),
        ));
    }
    let samples = &samples[..args.limit.unwrap_or(32).min(samples.len())];
    if samples.is_empty() {
        return Err(Error::Data("no windows to average".into()));
    }
    let n = loaded.graph.n_nodes();
    let views: Vec<cool::Matrix> = samples
        .par_iter()
        .map(|s| {
            let ins = loaded.model.inspect(&loaded.ckpt.params, s)?;
            let pair = ins.affinity_penalty().ok_or_else(|| Error::Data("no affinity graph recorded".into()))?;
            Ok(pair.aggregate_affinity(n))
        })
        .collect::<Result<_>>()?;
    let mut mean = cool::Matrix::zeros(n, n);
    for v in &views {
        mean.add_assign(v);
    }
    mean.scale_assign(1.0 / views.len() as f64);
    let ids = loaded.graph.node_ids();
    let mut csv = format!("node,{}\n", ids.join(","));
    for i in 0..n {
        let row: Vec<String> = mean.row(i).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(csv, "{},{}", ids[i], row.join(","));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| mean.row(i).to_vec()).collect();
    let svg =
        svg::heatmaps(&format!("mean affinity over {} windows", samples.len()), &[("affinity".to_string(), rows)]);
    let (a, b) = (out.join("affinity.svg"), out.join("affinity.csv"));
    write_file(&a, &svg)?;
    write_file(&b, &csv)?;
    Ok(vec![a, b])
}
