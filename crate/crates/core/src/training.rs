//! Optimizer, training loop and checkpoint container.

use crate::config::TrainConfig;
use crate::dataset_io::{Normalizer, RoadGraph, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{pooled_metrics, Forecaster, MetricOptions};
use crate::matrix::Matrix;
use crate::model::{Model, ModelParams};
use crate::params::ParamGroup;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"COOLCKPT1";
const CHECKPOINT_VERSION: u32 = 1;

/// Mean absolute error over masked-in entries.
pub fn mae_loss(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::Data(format!(
            "loss inputs differ in length: prediction {}, target {}, mask {}",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, t), m) in pred.iter().zip(target).zip(mask) {
        if *m {
            sum += (p - t).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("loss has no masked-in entries".into()));
    }
    Ok(sum / n as f64)
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let zeros: Vec<Matrix> = params.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &[Matrix]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.learning_rate);
        let mut k = 0;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |p| {
            let (m, v, g) = (&mut m_all[k], &mut v_all[k], &grads[k]);
            for (((w, mi), vi), gi) in
                p.as_mut_slice().iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice()).zip(g.as_slice())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
            k += 1;
        });
    }
}

/// One structured record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Normalized units, averaged over the epoch's batches before each update.
    pub train_mae: f64,
    /// Original units, pooled over all output steps.
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: Option<f64>,
    pub wall_seconds: f64,
}

/// Everything needed to evaluate a model or continue training it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub normalizer: Normalizer,
    pub node_ids: Vec<String>,
    pub params: ModelParams,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_mae: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stale_epochs: usize,
    pub rng: ChaCha8Rng,
    pub optimizer: Option<Adam>,
    pub best_params: Option<ModelParams>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainConfig,
    normalizer: Normalizer,
    node_ids: Vec<String>,
    epoch: usize,
    best_val_mae: Option<f64>,
    best_epoch: Option<usize>,
    stale_epochs: usize,
    rng: ChaCha8Rng,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn model(&self, graph: &RoadGraph) -> Result<Model> {
        if graph.node_ids() != self.node_ids.as_slice() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on {} nodes that do not match the {} graph nodes",
                self.node_ids.len(),
                graph.n_nodes()
            )));
        }
        Model::new(&self.config, graph, self.normalizer.clone())
    }

    fn sections(&self) -> Vec<(&'static str, Vec<(String, &Matrix)>)> {
        let mut out = vec![("param", self.params.named_tensors())];
        if let Some(b) = &self.best_params {
            out.push(("best", b.named_tensors()));
        }
        if let Some(opt) = &self.optimizer {
            let names: Vec<String> = self.params.named_tensors().into_iter().map(|(n, _)| n).collect();
            out.push(("adam_m", names.iter().cloned().zip(opt.m.iter()).collect()));
            out.push(("adam_v", names.into_iter().zip(opt.v.iter()).collect()));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let sections = self.sections();
        let tensors: Vec<TensorEntry> = sections
            .iter()
            .flat_map(|(prefix, ts)| {
                ts.iter().map(move |(n, m)| TensorEntry {
                    name: format!("{prefix}/{n}"),
                    rows: m.rows(),
                    cols: m.cols(),
                })
            })
            .collect();
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
            node_ids: self.node_ids.clone(),
            epoch: self.epoch,
            best_val_mae: self.best_val_mae,
            best_epoch: self.best_epoch,
            stale_epochs: self.stale_epochs,
            rng: self.rng.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, ts) in &sections {
            for (_, m) in ts {
                for v in m.as_slice() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint: bad magic"));
        }
        let mut pos = CHECKPOINT_MAGIC.len();
        let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        let json = bytes.get(pos..pos.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
        pos += len;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", header.version)));
        }
        header.config.validate()?;
        let n_features = header.normalizer.n_features();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = ModelParams::init(&header.config, n_features, &mut rng)?;

        let mut entries = header.tensors.iter();
        let mut read_section = |prefix: &str, target: &mut ModelParams| -> Result<()> {
            let names: Vec<(String, usize, usize)> =
                target.named_tensors().into_iter().map(|(n, m)| (n, m.rows(), m.cols())).collect();
            let mut k = 0;
            let mut failure = None;
            target.visit_mut(&mut |m| {
                if failure.is_some() {
                    return;
                }
                let (name, rows, cols) = &names[k];
                k += 1;
                match entries.next() {
                    Some(e) if e.name == format!("{prefix}/{name}") && e.rows == *rows && e.cols == *cols => {
                        let n = rows * cols * 8;
                        match bytes.get(pos..pos + n) {
                            Some(raw) => {
                                for (dst, chunk) in m.as_mut_slice().iter_mut().zip(raw.chunks_exact(8)) {
                                    *dst = f64::from_le_bytes(chunk.try_into().unwrap());
                                }
                                pos += n;
                            }
                            None => failure = Some(bad("truncated tensor data")),
                        }
                    }
                    Some(e) => {
                        failure = Some(Error::Checkpoint(format!(
                            "tensor {} ({}x{}) does not match expected {prefix}/{name} ({rows}x{cols})",
                            e.name, e.rows, e.cols
                        )))
                    }
                    None => failure = Some(Error::Checkpoint(format!("missing tensor {prefix}/{name}"))),
                }
            });
            failure.map_or(Ok(()), Err)
        };

        let mut params = template.clone();
        read_section("param", &mut params)?;
        let has = |p: &str| header.tensors.iter().any(|e| e.name.starts_with(&format!("{p}/")));
        let best_params = if has("best") {
            let mut b = template.clone();
            read_section("best", &mut b)?;
            Some(b)
        } else {
            None
        };
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let mut m = template.clone();
                let mut v = template.clone();
                read_section("adam_m", &mut m)?;
                read_section("adam_v", &mut v)?;
                let mut opt = Adam::new(&params, header.config.learning_rate);
                opt.step = step;
                opt.m = m.tensors().into_iter().cloned().collect();
                opt.v = v.tensors().into_iter().cloned().collect();
                Some(opt)
            }
            None => None,
        };
        drop(read_section);
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        if !params.is_finite() {
            return Err(bad("checkpoint holds non-finite parameters"));
        }
        Ok(Self {
            config: header.config,
            normalizer: header.normalizer,
            node_ids: header.node_ids,
            params,
            epoch: header.epoch,
            best_val_mae: header.best_val_mae,
            best_epoch: header.best_epoch,
            stale_epochs: header.stale_epochs,
            rng: header.rng,
            optimizer,
            best_params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.params.is_finite() {
            return Err(Error::Numeric("refusing to save non-finite parameters".into()));
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The best-validation parameters as a standalone checkpoint (no optimizer).
    pub fn best(&self) -> Checkpoint {
        let mut c = self.clone();
        if let Some(b) = c.best_params.take() {
            c.params = b;
        }
        c.optimizer = None;
        if let Some(e) = c.best_epoch {
            c.epoch = e;
        }
        c
    }
}

/// A trained model bundled with its parameters.
pub struct ModelForecaster<'a> {
    pub model: &'a Model,
    pub params: &'a ModelParams,
}

impl Forecaster for ModelForecaster<'_> {
    fn forecast(&self, sample: &Sample) -> Result<Vec<f64>> {
        self.model.predict(self.params, sample)
    }
}

/// Owns parameters, optimizer and RNG; gradient application is sequential.
pub struct Trainer {
    model: Model,
    node_ids: Vec<String>,
    params: ModelParams,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    best_val_mae: Option<f64>,
    best_epoch: Option<usize>,
    best_params: Option<ModelParams>,
    stale_epochs: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, graph: &RoadGraph, normalizer: Normalizer) -> Result<Self> {
        let model = Model::new(config, graph, normalizer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = model.init_params(&mut rng)?;
        Ok(Self {
            adam: Adam::new(&params, config.learning_rate),
            node_ids: graph.node_ids().to_vec(),
            model,
            params,
            rng,
            epoch: 0,
            best_val_mae: None,
            best_epoch: None,
            best_params: None,
            stale_epochs: 0,
        })
    }

    /// Continues from a checkpoint; `epochs` may be raised to train longer.
    pub fn resume(checkpoint: Checkpoint, graph: &RoadGraph, epochs: Option<usize>) -> Result<Self> {
        let mut config = checkpoint.config.clone();
        if let Some(e) = epochs {
            config.epochs = e;
        }
        let model = Model::new(&config, graph, checkpoint.normalizer.clone())?;
        if graph.node_ids() != checkpoint.node_ids.as_slice() {
            return Err(Error::Checkpoint("checkpoint nodes do not match the graph".into()));
        }
        let adam = checkpoint.optimizer.clone().unwrap_or_else(|| Adam::new(&checkpoint.params, config.learning_rate));
        Ok(Self {
            model,
            node_ids: checkpoint.node_ids,
            params: checkpoint.params,
            adam,
            rng: checkpoint.rng,
            epoch: checkpoint.epoch,
            best_val_mae: checkpoint.best_val_mae,
            best_epoch: checkpoint.best_epoch,
            best_params: checkpoint.best_params,
            stale_epochs: checkpoint.stale_epochs,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best_val_mae(&self) -> Option<f64> {
        self.best_val_mae
    }

    pub fn forecaster(&self) -> ModelForecaster<'_> {
        ModelForecaster { model: &self.model, params: &self.params }
    }

    fn diagnostics(&self, what: &str, batch: usize) -> Error {
        let mut norms = self.params.norms();
        norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Less));
        let snapshot: Vec<String> = norms.iter().take(6).map(|(n, v)| format!("{n}={v:.4e}")).collect();
        Error::Numeric(format!(
            "{what} at epoch {}, batch {batch}, after {} optimizer steps; largest parameter norms: {}",
            self.epoch + 1,
            self.adam.step,
            snapshot.join(", ")
        ))
    }

    /// Sum of masked absolute errors, the masked-in count and summed
    /// gradients. Samples run in parallel; the reduction follows batch order.
    pub fn batch_gradient(&self, batch: &[&Sample]) -> Result<(f64, usize, Vec<Matrix>)> {
        let per: Vec<(f64, usize, Vec<Matrix>)> =
            batch.par_iter().map(|s| self.model.sample_gradient(&self.params, s)).collect::<Result<_>>()?;
        let mut iter = per.into_iter();
        let (mut sum, mut count, mut grads) = iter.next().ok_or_else(|| Error::Data("empty batch".into()))?;
        for (s, c, g) in iter {
            sum += s;
            count += c;
            for (a, b) in grads.iter_mut().zip(&g) {
                a.add_assign(b);
            }
        }
        Ok((sum, count, grads))
    }

    /// One optimizer step on `batch`; returns the pre-update normalized MAE,
    /// or `None` if the batch has no observed targets.
    pub fn step(&mut self, batch: &[&Sample], batch_index: usize) -> Result<Option<f64>> {
        let (sum, count, mut grads) = match self.batch_gradient(batch) {
            Ok(r) => r,
            Err(Error::Numeric(m)) => return Err(self.diagnostics(&m, batch_index)),
            Err(e) => return Err(e),
        };
        if count == 0 {
            return Ok(None);
        }
        let loss = sum / count as f64;
        if !loss.is_finite() {
            return Err(self.diagnostics(&format!("non-finite loss {loss}"), batch_index));
        }
        let inv = 1.0 / count as f64;
        grads.iter_mut().for_each(|g| g.scale_assign(inv));
        let norm = clip_global_norm(&mut grads, self.model.config().grad_clip);
        if !norm.is_finite() {
            return Err(self.diagnostics("non-finite gradient", batch_index));
        }
        let before = self.params.clone();
        self.adam.apply(&mut self.params, &grads);
        if !self.params.is_finite() {
            self.params = before;
            return Err(self.diagnostics("update produced non-finite parameters", batch_index));
        }
        Ok(Some(loss))
    }

    pub fn is_finished(&self) -> bool {
        let c = self.model.config();
        self.epoch >= c.epochs || (c.early_stop_patience > 0 && self.stale_epochs >= c.early_stop_patience)
    }

    /// Shuffled pass over `train`, then validation.
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data("training needs non-empty train and validation splits".into()));
        }
        let start = Instant::now();
        let order = crate::dataset_io::epoch_order(train.len(), Some(&mut self.rng));
        let bs = self.model.config().batch_size;
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (b, chunk) in order.chunks(bs).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&k| &train[k]).collect();
            if let Some(loss) = self.step(&batch, b + 1)? {
                loss_sum += loss;
                batches += 1;
            }
        }
        let c = self.model.config();
        let options = MetricOptions { mape_floor: c.mape_floor, use_mask: c.mask_metrics };
        let val_metrics = pooled_metrics(&self.forecaster(), val, options)?
            .ok_or_else(|| Error::Data("validation split has no observed targets".into()))?;
        self.epoch += 1;
        let improved = self.best_val_mae.is_none_or(|b| val_metrics.mae < b);
        if improved {
            self.best_val_mae = Some(val_metrics.mae);
            self.best_epoch = Some(self.epoch);
            self.best_params = Some(self.params.clone());
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        Ok(EpochRecord {
            epoch: self.epoch,
            train_mae: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            val_mae: val_metrics.mae,
            val_rmse: val_metrics.rmse,
            val_mape: val_metrics.mape,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs epochs until the configured count or early stop; `on_epoch` sees
    /// every record and the trainer state.
    pub fn fit(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&EpochRecord, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut log = Vec::new();
        while !self.is_finished() {
            let rec = self.run_epoch(train, val)?;
            log::info!(
                "epoch {} train_mae {:.4} val_mae {:.4} ({:.1}s)",
                rec.epoch,
                rec.train_mae,
                rec.val_mae,
                rec.wall_seconds
            );
            on_epoch(&rec, self)?;
            log.push(rec);
        }
        Ok(log)
    }

    /// Full state after the latest epoch.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            normalizer: self.model.normalizer().clone(),
            node_ids: self.node_ids.clone(),
            params: self.params.clone(),
            epoch: self.epoch,
            best_val_mae: self.best_val_mae,
            best_epoch: self.best_epoch,
            stale_epochs: self.stale_epochs,
            rng: self.rng.clone(),
            optimizer: Some(self.adam.clone()),
            best_params: self.best_params.clone(),
        }
    }
}

/// Trains from scratch and returns the full last-epoch checkpoint plus the log.
pub fn train(
    config: &TrainConfig,
    graph: &RoadGraph,
    normalizer: Normalizer,
    train: &[Sample],
    val: &[Sample],
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let mut t = Trainer::new(config, graph, normalizer)?;
    let log = t.fit(train, val, |_, _| Ok(()))?;
    Ok((t.checkpoint(), log))
}
