use std::path::Path;

use nisqa_nn::{Adam, AdamConfig, Gradients, Mode, NnError, Real};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::TrainConfig;
use super::early_stopping::EarlyStopping;
use super::loss::{mapped_loss, mapped_targets, BiasMaps, LossMode};
use crate::audio::load_audio;
use crate::error::{Error, Result};
use crate::evaluate::pearson;
use crate::features::{extract_segments, MelSegments};
use crate::manifest::DatasetManifest;
use crate::model::{Model, SegmentBatch, WeightBundle};
use crate::scores::Task;
use crate::simulate::derive_seed;

/// Manifest rows with their segments extracted once.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub items: Vec<MelSegments>,
    pub labels: Vec<[f64; 5]>,
    /// Index into `dataset_names` per item.
    pub datasets: Vec<usize>,
    pub dataset_names: Vec<String>,
    pub conditions: Vec<Option<u32>>,
}

impl TrainingSet {
    /// Loads and segments every file (in parallel). Any unreadable file is
    /// an error.
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Empty("manifest has no rows".into()));
        }
        let items = manifest
            .rows
            .par_iter()
            .map(|row| extract_segments(&load_audio(manifest.resolve(row))?))
            .collect::<Result<Vec<_>>>()?;
        let dataset_names = manifest.dataset_names();
        Ok(Self {
            items,
            labels: manifest.rows.iter().map(|r| r.labels.to_array()).collect(),
            datasets: manifest
                .rows
                .iter()
                .map(|r| dataset_names.iter().position(|n| *n == r.dataset_name).unwrap_or(0))
                .collect(),
            dataset_names,
            conditions: manifest.rows.iter().map(|r| r.condition_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Model outputs for every item, evaluated in chunks of `batch_size`.
    pub fn predict<T: Real>(&self, model: &Model<T>, batch_size: usize) -> Result<Vec<[f64; 5]>> {
        let mut out = Vec::with_capacity(self.len());
        let refs: Vec<&MelSegments> = self.items.iter().collect();
        for chunk in refs.chunks(batch_size.max(1)) {
            out.extend(model.predict_batch(chunk)?.iter().map(|q| q.to_array()));
        }
        Ok(out)
    }

    /// Correlation on `task`, averaged over datasets whose correlation is
    /// defined. With `per_condition`, each dataset is first reduced to
    /// condition means (rows without a condition id stand alone).
    pub fn average_pcc(&self, preds: &[[f64; 5]], task: Task, per_condition: bool) -> Option<f64> {
        let t = task.index();
        let rs: Vec<f64> = (0..self.dataset_names.len())
            .filter_map(|d| {
                let idx: Vec<usize> = (0..self.len()).filter(|&i| self.datasets[i] == d).collect();
                let (p, l): (Vec<f64>, Vec<f64>) = if per_condition {
                    let mut groups: std::collections::BTreeMap<(u32, usize), (f64, f64, usize)> = Default::default();
                    for &i in &idx {
                        let key = self.conditions[i].map_or((u32::MAX, i), |c| (c, 0));
                        let e = groups.entry(key).or_default();
                        e.0 += preds[i][t];
                        e.1 += self.labels[i][t];
                        e.2 += 1;
                    }
                    groups.values().map(|&(p, l, n)| (p / n as f64, l / n as f64)).unzip()
                } else {
                    idx.iter().map(|&i| (preds[i][t], self.labels[i][t])).unzip()
                };
                pearson(&p, &l).ok()
            })
            .collect();
        (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean mapped loss over the epoch's batches.
    pub train_loss: f64,
    /// MOS correlation of the epoch's training predictions, dataset average.
    pub train_pcc: Option<f64>,
    /// MOS correlation on the validation set, dataset average.
    pub val_pcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config_id: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept; 0 when no epoch had a defined
    /// validation correlation (the final weights are kept then).
    pub best_epoch: usize,
    pub best_val_pcc: Option<f64>,
    pub stopped_early: bool,
}

pub const RUN_CSV_HEADER: [&str; 8] =
    ["config_id", "seed", "epoch", "train_loss", "train_pcc", "val_pcc", "best_epoch", "best_val_pcc"];

/// Writes one line per epoch of every run.
pub fn write_run_records(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(RUN_CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in records {
        for e in &r.epochs {
            w.write_record([
                r.config_id.clone(),
                r.seed.to_string(),
                e.epoch.to_string(),
                e.train_loss.to_string(),
                opt(e.train_pcc),
                opt(e.val_pcc),
                r.best_epoch.to_string(),
                opt(r.best_val_pcc),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Hook called after each epoch's validation, before the stopping
/// decision. It may rewrite `record.val_pcc`, which then drives model
/// selection and early stopping.
pub trait EpochObserver {
    fn on_epoch(&mut self, record: &mut EpochRecord, model: &Model<f32>);
}

impl EpochObserver for () {
    fn on_epoch(&mut self, _: &mut EpochRecord, _: &Model<f32>) {}
}

impl<F: FnMut(&mut EpochRecord, &Model<f32>)> EpochObserver for F {
    fn on_epoch(&mut self, record: &mut EpochRecord, model: &Model<f32>) {
        self(record, model)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// Weights of the best validation epoch.
    pub bundle: WeightBundle,
}

/// Loads both manifests and trains one model per [`train_on`].
pub fn train_model(train: &DatasetManifest, val: &DatasetManifest, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    let train = TrainingSet::from_manifest(train)?;
    let val = TrainingSet::from_manifest(val)?;
    train_on(&train, &val, config, seed, &mut ())
}

/// Adam on shuffled mini-batches (padded to each batch's longest item),
/// bias maps refitted after every epoch, early stopping on validation MOS
/// correlation. Single-threaded and fully determined by `seed`.
pub fn train_on(
    train: &TrainingSet,
    val: &TrainingSet,
    config: &TrainConfig,
    seed: u64,
    observer: &mut dyn EpochObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation sets must not be empty".into()));
    }
    let mut model = Model::<f32>::new(config.model.clone(), seed)?;
    let mut adam = Adam::new(model.params(), AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let n_datasets = train.dataset_names.len();
    let mut maps = BiasMaps::identity(n_datasets);
    let mut stopper = EarlyStopping::new(config.patience_epochs);
    let mut best_params = None;
    let mut record = RunRecord {
        config_id: config.model.name(),
        seed,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_pcc: None,
        stopped_early: false,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64])));
        let mut epoch_preds = vec![[0.0; 5]; train.len()];
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<&MelSegments> = idx.iter().map(|&i| &train.items[i]).collect();
            let labels: Vec<[f64; 5]> = idx.iter().map(|&i| train.labels[i]).collect();
            let datasets: Vec<usize> = idx.iter().map(|&i| train.datasets[i]).collect();
            let batch = SegmentBatch::<f32>::new(&items)?;
            let (targets, weights) = mapped_targets(&labels, &datasets, &maps, &config.tasks);
            let non_finite = |what: String| {
                Error::NonFiniteLoss(format!("{} seed {seed}: {what} at epoch {epoch}, batch {bi}", config.model.name()))
            };
            let step = || -> Result<(f64, Gradients<f32>, Vec<f32>)> {
                let mut g = model.graph(Mode::Train, derive_seed(&[seed, epoch as u64, bi as u64]));
                let out = model.forward(&mut g, &batch)?;
                let scores = g.value(out.scores).data().to_vec();
                let loss = g.weighted_squared_error(
                    out.scores,
                    targets.iter().map(|&v| v as f32).collect(),
                    weights.iter().map(|&v| v as f32).collect(),
                )?;
                let value = g.value(loss).data()[0] as f64;
                Ok((value, g.backward(loss)?, scores))
            };
            let (value, grads, scores) = step().map_err(|e| match e {
                Error::Nn(NnError::NonFinite(op)) => non_finite(format!("non-finite value in {op}")),
                other => other,
            })?;
            if !value.is_finite() {
                return Err(non_finite(format!("loss {value}")));
            }
            for (k, &i) in idx.iter().enumerate() {
                epoch_preds[i] = std::array::from_fn(|t| scores[k * 5 + t] as f64);
            }
            loss_sum += value;
            n_batches += 1;
            adam.step(model.params_mut(), &grads)?;
        }

        let train_pcc = train.average_pcc(&epoch_preds, Task::Mos, false);
        if config.loss == LossMode::BiasAware {
            maps = BiasMaps::fit(&epoch_preds, &train.labels, &train.datasets, n_datasets, config.bias_min_r);
        }
        let val_preds = val.predict(&model, config.batch_size)?;
        let mut rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            train_pcc,
            val_pcc: val.average_pcc(&val_preds, Task::Mos, config.val_per_condition),
        };
        observer.on_epoch(&mut rec, &model);
        let decision = stopper.update(rec.val_pcc);
        if decision.improved {
            best_params = Some(model.params().clone());
            record.best_epoch = epoch;
            record.best_val_pcc = rec.val_pcc;
        }
        log::info!(
            "{} seed {seed} epoch {epoch}: loss {:.4}, train r {}, val r {}{}",
            record.config_id,
            rec.train_loss,
            fmt_opt(rec.train_pcc),
            fmt_opt(rec.val_pcc),
            if decision.improved { " *" } else { "" }
        );
        record.epochs.push(rec);
        let reached = matches!((config.target_val_pcc, record.best_val_pcc), (Some(t), Some(v)) if v >= t);
        if decision.stop || reached {
            record.stopped_early = epoch < config.max_epochs;
            break;
        }
    }

    let model = match best_params {
        Some(p) => Model::from_params(config.model.clone(), p)?,
        None => model,
    };
    Ok(TrainOutcome { record, bundle: WeightBundle::from_model(&model) })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

/// Loss of a fixed batch under the current weights, in evaluation mode.
pub fn batch_loss(
    model: &Model<f32>,
    items: &[&MelSegments],
    labels: &[[f64; 5]],
    datasets: &[usize],
    maps: &BiasMaps,
    tasks: &[Task],
) -> Result<f64> {
    let preds: Vec<[f64; 5]> = model.predict_batch(items)?.iter().map(|q| q.to_array()).collect();
    Ok(mapped_loss(&preds, labels, datasets, maps, tasks))
}

/// One Adam step on a fixed batch with dropout disabled; returns the loss
/// before the step.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut Adam<f32>,
    items: &[&MelSegments],
    labels: &[[f64; 5]],
    datasets: &[usize],
    maps: &BiasMaps,
    tasks: &[Task],
) -> Result<f64> {
    let batch = SegmentBatch::<f32>::new(items)?;
    let (targets, weights) = mapped_targets(labels, datasets, maps, tasks);
    let (value, grads) = {
        let mut g = model.graph(Mode::Eval, 0);
        let out = model.forward(&mut g, &batch)?;
        let loss = g.weighted_squared_error(
            out.scores,
            targets.iter().map(|&v| v as f32).collect(),
            weights.iter().map(|&v| v as f32).collect(),
        )?;
        (g.value(loss).data()[0] as f64, g.backward(loss)?)
    };
    adam.step(model.params_mut(), &grads)?;
    Ok(value)
}
