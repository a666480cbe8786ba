//! File → label bindings stored as CSV with columns
//! `filepath, condition_id, mos, noi, col, dis, lou, dataset_name[, votes]`.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::scores::QualityScores;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// Absolute, or relative to the manifest's directory.
    pub filepath: String,
    pub dataset_name: String,
    pub condition_id: Option<u32>,
    pub labels: QualityScores,
    pub votes: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    /// Directory that relative file paths resolve against.
    pub base_dir: PathBuf,
}

#[derive(Deserialize)]
struct Record {
    filepath: String,
    #[serde(default)]
    condition_id: Option<u32>,
    mos: f64,
    noi: f64,
    col: f64,
    dis: f64,
    lou: f64,
    dataset_name: String,
    #[serde(default)]
    votes: Option<u32>,
}

impl DatasetManifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Self {
        Self { rows, base_dir: base_dir.into() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |detail: String| Error::Manifest { path: path.to_path_buf(), detail };
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<Record>().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| bad(format!("row {line}: {e}")))?;
            if rec.filepath.is_empty() {
                return Err(bad(format!("row {line}: empty filepath")));
            }
            let labels = QualityScores::from_array([rec.mos, rec.noi, rec.col, rec.dis, rec.lou]);
            if !labels.to_array().iter().all(|v| (1.0..=5.0).contains(v)) {
                return Err(bad(format!("row {line}: labels {:?} outside [1, 5]", labels.to_array())));
            }
            rows.push(ManifestRow {
                filepath: rec.filepath,
                dataset_name: rec.dataset_name,
                condition_id: rec.condition_id,
                labels,
                votes: rec.votes,
            });
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { rows, base_dir })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let with_votes = self.rows.iter().any(|r| r.votes.is_some());
        let mut header = vec!["filepath", "condition_id", "mos", "noi", "col", "dis", "lou", "dataset_name"];
        if with_votes {
            header.push("votes");
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.filepath.clone(), r.condition_id.map(|c| c.to_string()).unwrap_or_default()];
            rec.extend(r.labels.to_array().iter().map(|v| v.to_string()));
            rec.push(r.dataset_name.clone());
            if with_votes {
                rec.push(r.votes.map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.filepath);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Distinct dataset names in order of first appearance.
    pub fn dataset_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.dataset_name) {
                names.push(r.dataset_name.clone());
            }
        }
        names
    }
}
