//! Correlation and mapped-RMSE metrics per dataset and task, on files or
//! on condition means.

mod metrics;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;

pub use metrics::{pearson, rmse, rmse_first_order, FirstOrderFit};

use crate::audio::load_audio;
use crate::error::{Error, Result};
use crate::features::extract_segments;
use crate::manifest::{DatasetManifest, ManifestRow};
use crate::model::{Model, WeightBundle};
use crate::scores::{QualityScores, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    File,
    Condition,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::File => "file",
            Level::Condition => "condition",
        })
    }
}

/// Mean labels and predictions of one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMean {
    pub dataset_name: String,
    pub condition_id: u32,
    pub n_files: usize,
    pub labels: [f64; 5],
    pub predictions: [f64; 5],
}

/// Order-independent mean: summing sorted values makes the result
/// bit-identical under any permutation of the inputs.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Groups rows by (dataset, condition id) and averages labels and
/// predictions per task. Output is sorted by dataset then condition id.
pub fn per_condition_aggregate(rows: &[&ManifestRow], predictions: &[&QualityScores]) -> Result<Vec<ConditionMean>> {
    if rows.len() != predictions.len() {
        return Err(Error::Metric(format!("{} rows but {} predictions", rows.len(), predictions.len())));
    }
    type Bucket = ([Vec<f64>; 5], [Vec<f64>; 5]);
    let mut groups: BTreeMap<(&str, u32), Bucket> = BTreeMap::new();
    for (row, pred) in rows.iter().zip(predictions) {
        let id = row
            .condition_id
            .ok_or_else(|| Error::Metric(format!("{} has no condition id", row.filepath)))?;
        let entry = groups.entry((row.dataset_name.as_str(), id)).or_default();
        for t in Task::ALL {
            entry.0[t.index()].push(row.labels.get(t));
            entry.1[t.index()].push(pred.get(t));
        }
    }
    Ok(groups
        .into_iter()
        .map(|((dataset, id), (mut labels, mut preds))| ConditionMean {
            dataset_name: dataset.to_string(),
            condition_id: id,
            n_files: labels[0].len(),
            labels: std::array::from_fn(|t| stable_mean(&mut labels[t])),
            predictions: std::array::from_fn(|t| stable_mean(&mut preds[t])),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub level: Level,
    pub task: Task,
    /// `None` when undefined (constant labels or predictions, or n < 2).
    pub r: Option<f64>,
    /// RMSE after the first-order map.
    pub rmse: Option<f64>,
    /// RMSE without mapping.
    pub rmse_raw: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// Points the metrics were computed on (files or conditions).
    pub n: usize,
    pub n_files: usize,
    pub n_conditions: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// Manifest rows excluded because prediction failed.
    pub failures: usize,
}

pub const REPORT_HEADER: [&str; 12] =
    ["dataset", "level", "task", "r", "rmse", "rmse_raw", "a", "b", "n", "n_files", "n_conditions", "failures"];

impl EvalReport {
    pub fn get(&self, dataset: &str, level: Level, task: Task) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.dataset == dataset && r.level == level && r.task == task)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(REPORT_HEADER)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.dataset.clone(),
                r.level.to_string(),
                r.task.to_string(),
                opt(r.r),
                opt(r.rmse),
                opt(r.rmse_raw),
                opt(r.a),
                opt(r.b),
                r.n.to_string(),
                r.n_files.to_string(),
                r.n_conditions.to_string(),
                self.failures.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn metric_row(dataset: &str, level: Level, task: Task, pred: &[f64], label: &[f64], n_files: usize, n_cond: usize) -> ReportRow {
    let fit = rmse_first_order(pred, label).ok();
    ReportRow {
        dataset: dataset.to_string(),
        level,
        task,
        r: pearson(pred, label).ok(),
        rmse: fit.map(|f| f.rmse),
        rmse_raw: rmse(pred, label).ok(),
        a: fit.map(|f| f.a),
        b: fit.map(|f| f.b),
        n: pred.len(),
        n_files,
        n_conditions: n_cond,
    }
}

/// Metrics for every dataset and task at file level, plus condition level
/// when `per_condition` is set. Rows whose prediction is `None` are skipped
/// and counted as failures.
pub fn evaluate_predictions(
    manifest: &DatasetManifest,
    predictions: &[Option<QualityScores>],
    per_condition: bool,
) -> Result<EvalReport> {
    if manifest.len() != predictions.len() {
        return Err(Error::Metric(format!("{} rows but {} predictions", manifest.len(), predictions.len())));
    }
    let failures = predictions.iter().filter(|p| p.is_none()).count();
    let mut report = EvalReport { rows: Vec::new(), failures };
    for dataset in manifest.dataset_names() {
        let (rows, preds): (Vec<&ManifestRow>, Vec<&QualityScores>) = manifest
            .rows
            .iter()
            .zip(predictions)
            .filter(|(r, _)| r.dataset_name == dataset)
            .filter_map(|(r, p)| p.as_ref().map(|p| (r, p)))
            .unzip();
        let conditions = if rows.iter().all(|r| r.condition_id.is_some()) {
            Some(per_condition_aggregate(&rows, &preds)?)
        } else {
            None
        };
        let n_cond = conditions.as_ref().map_or(0, Vec::len);
        for task in Task::ALL {
            let p: Vec<f64> = preds.iter().map(|q| q.get(task)).collect();
            let l: Vec<f64> = rows.iter().map(|r| r.labels.get(task)).collect();
            report.rows.push(metric_row(&dataset, Level::File, task, &p, &l, rows.len(), n_cond));
        }
        if per_condition {
            let conds = conditions
                .as_ref()
                .ok_or_else(|| Error::Metric(format!("dataset {dataset} has rows without condition ids")))?;
            for task in Task::ALL {
                let p: Vec<f64> = conds.iter().map(|c| c.predictions[task.index()]).collect();
                let l: Vec<f64> = conds.iter().map(|c| c.labels[task.index()]).collect();
                report.rows.push(metric_row(&dataset, Level::Condition, task, &p, &l, rows.len(), n_cond));
            }
        }
    }
    Ok(report)
}

/// A manifest row whose audio could not be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct FileFailure {
    pub filepath: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    /// One entry per manifest row.
    pub predictions: Vec<Option<QualityScores>>,
    pub failures: Vec<FileFailure>,
}

/// Scores every manifest row in parallel and evaluates the predictions.
pub fn evaluate_model(bundle: &WeightBundle, manifest: &DatasetManifest, per_condition: bool) -> Result<Evaluation> {
    if manifest.is_empty() {
        return Err(Error::Empty("manifest has no rows".into()));
    }
    let model: Model<f32> = bundle.to_model()?;
    let results: Vec<Result<QualityScores>> = manifest
        .rows
        .par_iter()
        .map(|row| {
            let audio = load_audio(manifest.resolve(row))?;
            let mut q = model.predict_segments(&extract_segments(&audio)?)?;
            q.attention_weights = None;
            Ok(q)
        })
        .collect();
    let mut failures = Vec::new();
    let mut predictions = Vec::with_capacity(results.len());
    for (row, r) in manifest.rows.iter().zip(results) {
        match r {
            Ok(q) => predictions.push(Some(q)),
            Err(e) if e.is_data_error() => {
                failures.push(FileFailure { filepath: row.filepath.clone(), error: e.to_string() });
                predictions.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if !failures.is_empty() {
        log::warn!("{} of {} files could not be scored", failures.len(), manifest.len());
    }
    let report = evaluate_predictions(manifest, &predictions, per_condition)?;
    Ok(Evaluation { report, predictions, failures })
}

/// Predictions CSV: `filepath, mos, noi, col, dis, lou`.
pub fn write_predictions<'a>(path: impl AsRef<Path>, rows: impl IntoIterator<Item = (&'a str, &'a QualityScores)>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["filepath", "mos", "noi", "col", "dis", "lou"])?;
    for (name, q) in rows {
        let mut rec = vec![name.to_string()];
        rec.extend(q.to_array().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(serde::Deserialize)]
struct PredictionRecord {
    filepath: String,
    mos: f64,
    noi: f64,
    col: f64,
    dis: f64,
    lou: f64,
}

/// Reads a predictions CSV back as `(filepath, scores)` pairs. Extra
/// columns are ignored.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<(String, QualityScores)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for rec in reader.deserialize::<PredictionRecord>() {
        let r = rec?;
        out.push((r.filepath, QualityScores::from_array([r.mos, r.noi, r.col, r.dis, r.lou])));
    }
    Ok(out)
}
