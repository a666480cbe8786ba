//! Labelled corpora: clean files × degradation conditions.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::degrade::{apply_chain, derive_seed, Degradation};
use super::labels::label_sample;
use crate::audio::{load_audio, write_audio, AudioBuffer};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, ManifestRow};
use crate::scores::QualityScores;

/// Per-axis value lists whose cartesian product forms conditions. `null`
/// entries leave that degradation out. Chains apply in field order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    /// `[lo_hz, hi_hz]` pairs.
    pub bandpass: Vec<Option<[f64; 2]>>,
    pub clip_threshold: Vec<Option<f64>>,
    pub snr_db: Vec<Option<f64>>,
    /// `[loss_rate, burst_len]` pairs.
    pub erasure: Vec<Option<[f64; 2]>>,
    pub gain_db: Vec<Option<f64>>,
}

impl GridAxes {
    pub fn conditions(&self) -> Vec<Vec<Degradation>> {
        fn axis<T: Copy>(v: &[Option<T>]) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.to_vec()
            }
        }
        let mut out = Vec::new();
        for bp in axis(&self.bandpass) {
            for clip in axis(&self.clip_threshold) {
                for snr in axis(&self.snr_db) {
                    for er in axis(&self.erasure) {
                        for gain in axis(&self.gain_db) {
                            let mut chain = Vec::new();
                            if let Some([lo_hz, hi_hz]) = bp {
                                chain.push(Degradation::Bandpass { lo_hz, hi_hz });
                            }
                            if let Some(threshold) = clip {
                                chain.push(Degradation::Clipping { threshold });
                            }
                            if let Some(snr_db) = snr {
                                chain.push(Degradation::AdditiveNoise { snr_db });
                            }
                            if let Some([loss_rate, burst_len]) = er {
                                chain.push(Degradation::FrameErasure { loss_rate, burst_len });
                            }
                            if let Some(db) = gain {
                                chain.push(Degradation::GainShift { db });
                            }
                            out.push(chain);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Conditions drawn at random; each degradation type is included with
/// probability `p_each`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomConditions {
    pub count: usize,
    pub p_each: f64,
}

impl Default for RandomConditions {
    fn default() -> Self {
        Self { count: 0, p_each: 0.4 }
    }
}

impl RandomConditions {
    pub fn draw(&self, seed: u64) -> Vec<Vec<Degradation>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.count)
            .map(|_| {
                let mut chain = Vec::new();
                if rng.gen_bool(self.p_each) {
                    let hi_hz = [2_000.0, 3_400.0, 5_000.0, 7_000.0, 12_000.0, 20_000.0][rng.gen_range(0..6)];
                    chain.push(Degradation::Bandpass { lo_hz: rng.gen_range(50.0..600.0), hi_hz });
                }
                if rng.gen_bool(self.p_each) {
                    chain.push(Degradation::Clipping { threshold: rng.gen_range(0.03..1.0) });
                }
                if rng.gen_bool(self.p_each) {
                    chain.push(Degradation::AdditiveNoise { snr_db: rng.gen_range(0.0..40.0) });
                }
                if rng.gen_bool(self.p_each) {
                    chain.push(Degradation::FrameErasure {
                        loss_rate: rng.gen_range(0.0..0.35),
                        burst_len: rng.gen_range(1.0..4.0),
                    });
                }
                if rng.gen_bool(self.p_each) {
                    // Capped at +6 dB so the written PCM rarely saturates.
                    chain.push(Degradation::GainShift { db: rng.gen_range(-20.0..6.0) });
                }
                chain
            })
            .collect()
    }
}

/// Corpus layout, read from JSON. Condition ids number the explicit
/// conditions first, then the grid product, then the random draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionGrid {
    pub dataset_name: String,
    /// Files per condition; `None` uses every clean file once.
    pub files_per_condition: Option<usize>,
    pub conditions: Vec<Vec<Degradation>>,
    pub axes: Option<GridAxes>,
    pub random: Option<RandomConditions>,
}

impl Default for ConditionGrid {
    fn default() -> Self {
        Self { dataset_name: "sim".into(), files_per_condition: None, conditions: Vec::new(), axes: None, random: None }
    }
}

impl ConditionGrid {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// All condition chains in id order, validated.
    pub fn chains(&self, seed: u64) -> Result<Vec<Vec<Degradation>>> {
        let mut out = self.conditions.clone();
        if let Some(axes) = &self.axes {
            out.extend(axes.conditions());
        }
        if let Some(random) = &self.random {
            out.extend(random.draw(derive_seed(&[seed, u64::MAX])));
        }
        if out.is_empty() {
            return Err(Error::Config("condition grid defines no conditions".into()));
        }
        for d in out.iter().flatten() {
            d.validate()?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// Relative to the corpus directory.
    pub path: String,
    pub condition_id: u32,
    pub clean_index: usize,
    pub file_index: usize,
    pub chain: Vec<Degradation>,
    pub labels: QualityScores,
}

/// Lays out the corpus without touching audio.
pub fn plan_corpus(grid: &ConditionGrid, n_clean: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    if n_clean == 0 {
        return Err(Error::Empty("clean set is empty".into()));
    }
    let per = grid.files_per_condition.unwrap_or(n_clean);
    if per == 0 {
        return Err(Error::Config("files_per_condition must be positive".into()));
    }
    let chains = grid.chains(seed)?;
    let mut out = Vec::with_capacity(chains.len() * per);
    for (cond, chain) in chains.iter().enumerate() {
        let labels = label_sample(chain);
        for file in 0..per {
            out.push(LabeledSample {
                path: format!("wav/c{cond:04}_f{file:03}.wav"),
                condition_id: cond as u32,
                clean_index: (cond * per + file) % n_clean,
                file_index: file,
                chain: chain.clone(),
                labels: labels.clone(),
            });
        }
    }
    Ok(out)
}

/// Sorted `.wav` files of a directory.
pub fn list_wavs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// Degrades the clean files of `clean_dir` under every condition of `grid`,
/// writing `out_dir/wav/*.wav` and `out_dir/manifest.csv`.
pub fn build_corpus(
    clean_dir: impl AsRef<Path>,
    grid: &ConditionGrid,
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let clean_paths = list_wavs(&clean_dir)?;
    if clean_paths.is_empty() {
        return Err(Error::Empty(format!("no .wav files in {}", clean_dir.as_ref().display())));
    }
    let plan = plan_corpus(grid, clean_paths.len(), seed)?;
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let clean: Vec<AudioBuffer> = clean_paths.iter().map(load_audio).collect::<Result<_>>()?;

    plan.par_iter().try_for_each(|s| {
        let file_seed = derive_seed(&[seed, s.condition_id as u64, s.file_index as u64]);
        let out = apply_chain(&clean[s.clean_index], &s.chain, file_seed)?;
        write_audio(&out, out_dir.join(&s.path))
    })?;

    let rows = plan
        .into_iter()
        .map(|s| ManifestRow {
            filepath: s.path,
            dataset_name: grid.dataset_name.clone(),
            condition_id: Some(s.condition_id),
            labels: s.labels,
            votes: None,
        })
        .collect();
    let manifest = DatasetManifest::new(rows, out_dir);
    manifest.write(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
