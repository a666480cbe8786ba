use std::path::{Path, PathBuf};

use nisqa_core::evaluate::{evaluate_model, write_predictions};
use nisqa_core::features::extract_segments;
use nisqa_core::simulate::{build_corpus, list_wavs, write_clean_set, ConditionGrid};
use nisqa_core::train::{run_ablation, train_on, write_run_records, Stage, TrainConfig, TrainingSet};
use nisqa_core::{load_audio, load_bundle, DatasetManifest, Error, Model, QualityScores, Task};
use rayon::prelude::*;
use serde_json::json;

use crate::{AblateArgs, EvaluateArgs, PredictArgs, SynthArgs, SynthCleanArgs, TrainArgs};

/// A failed command: process exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { code: if e.is_data_error() { 2 } else { 3 }, message: e.to_string() }
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::data(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    std::fs::write(path, bytes).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

/// `preds.csv` → `preds.<suffix>`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    let config = match path {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

pub fn predict(a: &PredictArgs) -> CmdResult {
    let model: Model<f32> = load_bundle(&a.weights)?.to_model()?;
    let files = if a.input.is_dir() { list_wavs(&a.input)? } else { vec![a.input.clone()] };
    if files.is_empty() {
        return Err(Failure::data(format!("no .wav files in {}", a.input.display())));
    }
    let results: Vec<nisqa_core::Result<(QualityScores, usize)>> = files
        .par_iter()
        .map(|path| {
            let segs = extract_segments(&load_audio(path)?)?;
            Ok((model.predict_segments(&segs)?, segs.valid_length()))
        })
        .collect();

    let mut scored = Vec::new();
    let mut failed = 0usize;
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok(v) => scored.push((path.display().to_string(), v)),
            Err(e) if e.is_data_error() => {
                log::warn!("{}: {e}", path.display());
                failed += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if scored.is_empty() {
        return Err(Failure::data(format!("none of {} files could be scored", files.len())));
    }

    let mut w = csv::Writer::from_path(&a.output)?;
    let mut header = vec!["filepath", "mos", "noi", "col", "dis", "lou"];
    if a.segments {
        header.push("segments");
    }
    w.write_record(&header)?;
    for (name, (q, len)) in &scored {
        let mut rec = vec![name.clone()];
        rec.extend(q.to_array().iter().map(f64::to_string));
        if a.segments {
            rec.push(len.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Failure::data(format!("cannot write {}: {e}", a.output.display())))?;

    if a.dump_attention {
        let entries: Vec<_> = scored
            .iter()
            .map(|(name, (q, len))| {
                let weights = q.attention_weights.as_ref().map(|ws| {
                    Task::ALL.iter().zip(ws).map(|(t, w)| (t.key().to_string(), json!(w))).collect::<serde_json::Map<_, _>>()
                });
                json!({ "filepath": name, "segments": len, "weights": weights })
            })
            .collect();
        let text = serde_json::to_string_pretty(&entries).map_err(|e| Failure { code: 3, message: e.to_string() })?;
        write_file(&sidecar(&a.output, "attention.json"), text.as_bytes())?;
    }
    log::info!("scored {} files ({failed} failed)", scored.len());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> CmdResult {
    let bundle = load_bundle(&a.weights)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let eval = evaluate_model(&bundle, &manifest, a.per_condition)?;
    for f in &eval.failures {
        log::warn!("{}: {}", f.filepath, f.error);
    }
    if eval.failures.len() == manifest.len() {
        return Err(Failure::data(format!("none of {} files could be scored", manifest.len())));
    }
    eval.report.write_csv(&a.report)?;
    if let Some(path) = &a.predictions {
        let rows = manifest.rows.iter().zip(&eval.predictions).filter_map(|(r, p)| p.as_ref().map(|p| (r.filepath.as_str(), p)));
        write_predictions(path, rows)?;
    }
    for row in eval.report.rows.iter().filter(|r| r.task == Task::Mos) {
        log::info!("{} {:?} MOS: r {:?}, rmse {:?}, n {}", row.dataset, row.level, row.r, row.rmse, row.n);
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seeds = vec![seed];
    }
    if config.seeds.is_empty() {
        return Err(Failure::data("configuration lists no seeds"));
    }
    let train = TrainingSet::from_manifest(&DatasetManifest::read(&a.train_manifest)?)?;
    let val = TrainingSet::from_manifest(&DatasetManifest::read(&a.val_manifest)?)?;
    log::info!("{} training and {} validation files", train.len(), val.len());

    let mut records = Vec::new();
    let mut best: Option<(f64, nisqa_core::WeightBundle)> = None;
    for &seed in &config.seeds {
        let out = train_on(&train, &val, &config, seed, &mut ())?;
        let score = out.record.best_val_pcc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, out.bundle));
        }
        records.push(out.record);
    }
    let (_, bundle) = best.expect("at least one seed");
    bundle.save(&a.out)?;
    let runs = a.runs_csv.clone().unwrap_or_else(|| sidecar(&a.out, "runs.csv"));
    write_run_records(&runs, &records)?;
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> CmdResult {
    let stage: Stage = a.stage.parse().map_err(|e: Error| Failure::usage(e.to_string()))?;
    if a.runs == 0 {
        return Err(Failure::usage("--runs must be at least 1"));
    }
    let variants = if a.variants.is_empty() { stage.all_variants() } else { a.variants.clone() };
    let mut config = load_config(a.config.as_deref())?;
    config.seeds = (a.seed..a.seed + a.runs as u64).collect();
    for v in &variants {
        stage.apply(&config.model, v).map_err(|e| Failure::usage(e.to_string()))?;
    }
    let train = TrainingSet::from_manifest(&DatasetManifest::read(&a.train_manifest)?)?;
    let val = TrainingSet::from_manifest(&DatasetManifest::read(&a.val_manifest)?)?;
    let table = run_ablation(stage, &variants, &train, &val, &config)?;

    let text = table.render();
    print!("{text}");
    if let Some(path) = &a.output {
        write_file(path, text.as_bytes())?;
    }
    if let Some(path) = &a.runs_csv {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "seed", "val_pcc", "best_epoch", "epochs", "error"])?;
        for run in &table.runs {
            w.write_record([
                run.variant.clone(),
                run.seed.to_string(),
                run.val_pcc.map_or_else(String::new, |v| v.to_string()),
                run.record.as_ref().map_or_else(String::new, |r| r.best_epoch.to_string()),
                run.record.as_ref().map_or_else(String::new, |r| r.epochs.len().to_string()),
                run.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> CmdResult {
    let grid = ConditionGrid::from_json_file(&a.grid)?;
    let manifest = build_corpus(&a.clean_dir, &grid, &a.out_dir, a.seed)?;
    log::info!("wrote {} files to {}", manifest.len(), a.out_dir.display());
    Ok(())
}

pub fn synth_clean(a: &SynthCleanArgs) -> CmdResult {
    if a.count == 0 || !(a.duration > 0.0) {
        return Err(Failure::usage("--count and --duration must be positive"));
    }
    let files = write_clean_set(&a.out_dir, a.count, a.duration, a.seed)?;
    log::info!("wrote {} clean files to {}", files.len(), a.out_dir.display());
    Ok(())
}
