use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::config::TrainConfig;
use super::run::{train_on, RunRecord, TrainingSet};
use crate::error::{Error, Result};
use crate::model::{Framewise, ModelConfig, Pooling, TimeDependency};

/// Model stage whose alternatives are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Framewise,
    TimeDependency,
    Pooling,
}

impl Stage {
    /// Every variant of this stage, in table order.
    pub fn all_variants(self) -> Vec<String> {
        match self {
            Stage::Framewise => ["Skip", "CNN", "FFN"].map(String::from).to_vec(),
            Stage::TimeDependency => TimeDependency::ALL.iter().map(|v| v.label().to_string()).collect(),
            Stage::Pooling => Pooling::ALL.iter().map(|v| v.label().to_string()).collect(),
        }
    }

    /// `base` with this stage replaced by `variant`.
    pub fn apply(self, base: &ModelConfig, variant: &str) -> Result<ModelConfig> {
        let mut c = base.clone();
        match self {
            Stage::Framewise => c.framewise = variant.parse::<Framewise>()?,
            Stage::TimeDependency => c.td = variant.parse::<TimeDependency>()?,
            Stage::Pooling => c.pooling = variant.parse::<Pooling>()?,
        }
        Ok(c)
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "framewise" => Ok(Stage::Framewise),
            "td" | "time-dependency" | "time_dependency" => Ok(Stage::TimeDependency),
            "pooling" | "pool" => Ok(Stage::Pooling),
            other => Err(Error::Config(format!("unknown stage `{other}` (expected framewise, td or pooling)"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Framewise => "framewise",
            Stage::TimeDependency => "td",
            Stage::Pooling => "pooling",
        })
    }
}

/// One seeded training run of a variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    /// Best validation correlation; `None` if the run failed or never
    /// produced a defined correlation.
    pub val_pcc: Option<f64>,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub stage: Stage,
    pub variants: Vec<String>,
    /// Median best-validation correlation per variant.
    pub medians: Vec<Option<f64>>,
    pub runs: Vec<AblationRun>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl AblationTable {
    /// Two rows, `Model` with the variant names and `r` with the medians
    /// at three decimals, columns padded to a common width.
    pub fn render(&self) -> String {
        let mut head = vec!["Model".to_string()];
        head.extend(self.variants.iter().cloned());
        let mut row = vec!["r".to_string()];
        row.extend(self.medians.iter().map(|m| m.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))));
        let widths: Vec<usize> = head.iter().zip(&row).map(|(a, b)| a.len().max(b.len())).collect();
        let line = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
        };
        format!("{}\n{}\n", line(&head), line(&row))
    }

    pub fn median_of(&self, variant: &str) -> Option<f64> {
        let i = self.variants.iter().position(|v| v.eq_ignore_ascii_case(variant))?;
        self.medians[i]
    }
}

/// Trains every variant once per seed in `config.seeds`, in parallel
/// across runs. A failed run is recorded and excluded from its median.
pub fn run_ablation(
    stage: Stage,
    variants: &[String],
    train: &TrainingSet,
    val: &TrainingSet,
    config: &TrainConfig,
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant".into()));
    }
    config.validate()?;
    let mut jobs = Vec::new();
    for v in variants {
        let model = stage.apply(&config.model, v)?;
        model.validate()?;
        for &seed in &config.seeds {
            jobs.push((v.clone(), TrainConfig { model: model.clone(), ..config.clone() }, seed));
        }
    }
    let runs: Vec<AblationRun> = jobs
        .into_par_iter()
        .map(|(variant, cfg, seed)| match train_on(train, val, &cfg, seed, &mut ()) {
            Ok(out) => AblationRun {
                variant,
                seed,
                val_pcc: out.record.best_val_pcc,
                record: Some(out.record),
                error: None,
            },
            Err(e) => {
                log::warn!("{variant} seed {seed} failed: {e}");
                AblationRun { variant, seed, val_pcc: None, record: None, error: Some(e.to_string()) }
            }
        })
        .collect();
    let medians = variants
        .iter()
        .map(|v| {
            let vals: Vec<f64> = runs.iter().filter(|r| &r.variant == v).filter_map(|r| r.val_pcc).collect();
            median(&vals)
        })
        .collect();
    Ok(AblationTable { stage, variants: variants.to_vec(), medians, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn table_layout() {
        let t = AblationTable {
            stage: Stage::Framewise,
            variants: vec!["Skip".into(), "CNN".into(), "FFN".into()],
            medians: vec![Some(0.772), Some(0.87), None],
            runs: vec![],
        };
        assert_eq!(t.render(), "Model  Skip   CNN    FFN\nr      0.772  0.870  n/a\n");
    }

    #[test]
    fn stages_parse_and_apply() {
        let s: Stage = "TD".parse().unwrap();
        let c = s.apply(&ModelConfig::default(), "lstm-sa").unwrap();
        assert_eq!(c.td, TimeDependency::LstmSa);
        assert!(Stage::Pooling.apply(&ModelConfig::default(), "mean").is_err());
        assert_eq!(Stage::TimeDependency.all_variants(), ["Skip", "SA", "LSTM", "LSTM-SA", "SA-LSTM"]);
    }
}
