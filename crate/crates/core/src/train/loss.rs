use serde::{Deserialize, Serialize};

use crate::evaluate::{pearson, rmse_first_order};
use crate::scores::{QualityScores, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "MSE", alias = "mse", alias = "Mse")]
    Mse,
    /// Squared error after a per-dataset, per-task first-order map of the
    /// predictions onto the labels.
    #[default]
    #[serde(rename = "BiasAware", alias = "bias_aware", alias = "bias-aware")]
    BiasAware,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub a: f64,
    pub b: f64,
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap { a: 0.0, b: 1.0 };

    pub fn apply(&self, x: f64) -> f64 {
        self.a + self.b * x
    }
}

/// Per-dataset, per-task maps `label ≈ a + b·prediction`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMaps {
    maps: Vec<[AffineMap; 5]>,
}

impl BiasMaps {
    pub fn identity(n_datasets: usize) -> Self {
        Self { maps: vec![[AffineMap::IDENTITY; 5]; n_datasets] }
    }

    /// Least-squares maps per dataset and task. A map stays the identity
    /// when its dataset has fewer than two samples, when either side is
    /// constant, or when the prediction–label correlation is below `min_r`.
    pub fn fit(preds: &[[f64; 5]], labels: &[[f64; 5]], datasets: &[usize], n_datasets: usize, min_r: f64) -> Self {
        let mut out = Self::identity(n_datasets);
        for (d, maps) in out.maps.iter_mut().enumerate() {
            let idx: Vec<usize> = (0..preds.len()).filter(|&i| datasets[i] == d).collect();
            if idx.len() < 2 {
                if !idx.is_empty() {
                    log::warn!("dataset {d} has {} sample(s); bias map left at identity", idx.len());
                }
                continue;
            }
            for t in 0..5 {
                let p: Vec<f64> = idx.iter().map(|&i| preds[i][t]).collect();
                let l: Vec<f64> = idx.iter().map(|&i| labels[i][t]).collect();
                let Ok(r) = pearson(&p, &l) else { continue };
                if r < min_r {
                    continue;
                }
                if let Ok(fit) = rmse_first_order(&p, &l) {
                    if fit.b > 0.0 {
                        maps[t] = AffineMap { a: fit.a, b: fit.b };
                    }
                }
            }
        }
        out
    }

    pub fn get(&self, dataset: usize, task: usize) -> AffineMap {
        self.maps.get(dataset).map_or(AffineMap::IDENTITY, |m| m[task])
    }

    pub fn n_datasets(&self) -> usize {
        self.maps.len()
    }
}

pub(crate) fn task_mask(tasks: &[Task]) -> [bool; 5] {
    let mut m = [false; 5];
    for t in tasks {
        m[t.index()] = true;
    }
    m
}

/// Mean over the batch of squared errors, summed over `tasks`, with each
/// prediction first passed through its dataset's map.
pub fn mapped_loss(pred: &[[f64; 5]], labels: &[[f64; 5]], datasets: &[usize], maps: &BiasMaps, tasks: &[Task]) -> f64 {
    let active = task_mask(tasks);
    let n = pred.len() as f64;
    let mut sum = 0.0;
    for i in 0..pred.len() {
        for t in (0..5).filter(|&t| active[t]) {
            sum += (maps.get(datasets[i], t).apply(pred[i][t]) - labels[i][t]).powi(2);
        }
    }
    sum / n
}

/// Multi-task loss of one batch. In bias-aware mode the maps are fitted on
/// this same batch before the error is taken.
pub fn multitask_loss(
    pred: &[QualityScores],
    labels: &[QualityScores],
    datasets: &[usize],
    mode: LossMode,
    tasks: &[Task],
    min_r: f64,
) -> f64 {
    let p: Vec<[f64; 5]> = pred.iter().map(QualityScores::to_array).collect();
    let l: Vec<[f64; 5]> = labels.iter().map(QualityScores::to_array).collect();
    let n_datasets = datasets.iter().max().map_or(0, |m| m + 1);
    let maps = match mode {
        LossMode::Mse => BiasMaps::identity(n_datasets),
        LossMode::BiasAware => BiasMaps::fit(&p, &l, datasets, n_datasets, min_r),
    };
    mapped_loss(&p, &l, datasets, &maps, tasks)
}

/// Graph-side targets and weights so that `Σ w·(ŷ − target)²` equals
/// [`mapped_loss`]: `(a + b·ŷ − y)² = b²·(ŷ − (y − a)/b)²`.
pub(crate) fn mapped_targets(
    labels: &[[f64; 5]],
    datasets: &[usize],
    maps: &BiasMaps,
    tasks: &[Task],
) -> (Vec<f64>, Vec<f64>) {
    let active = task_mask(tasks);
    let n = labels.len() as f64;
    let mut targets = Vec::with_capacity(labels.len() * 5);
    let mut weights = Vec::with_capacity(labels.len() * 5);
    for (i, l) in labels.iter().enumerate() {
        for t in 0..5 {
            let m = maps.get(datasets[i], t);
            targets.push((l[t] - m.a) / m.b);
            weights.push(if active[t] { m.b * m.b / n } else { 0.0 });
        }
    }
    (targets, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_targets_reproduce_the_mapped_loss() {
        let pred = [[1.0, 2.0, 3.0, 4.0, 5.0], [2.0, 2.5, 1.0, 3.0, 4.0], [3.5, 1.0, 2.0, 2.0, 2.0]];
        let labels = [[1.5, 2.0, 3.5, 4.0, 4.5], [2.0, 3.0, 1.5, 3.0, 4.0], [4.0, 1.0, 2.5, 2.5, 1.0]];
        let datasets = [0, 1, 0];
        let mut maps = BiasMaps::identity(2);
        maps.maps[0][0] = AffineMap { a: 0.5, b: 0.8 };
        maps.maps[1][3] = AffineMap { a: -1.0, b: 1.7 };
        let tasks = [Task::Mos, Task::Dis, Task::Lou];
        let (targets, weights) = mapped_targets(&labels, &datasets, &maps, &tasks);
        let flat: Vec<f64> = pred.iter().flatten().copied().collect();
        let graph: f64 = flat.iter().zip(&targets).zip(&weights).map(|((p, t), w)| w * (p - t).powi(2)).sum();
        let direct = mapped_loss(&pred, &labels, &datasets, &maps, &tasks);
        assert!((graph - direct).abs() < 1e-12, "{graph} vs {direct}");
    }

    #[test]
    fn low_correlation_keeps_identity() {
        let preds = [[1.0; 5], [2.0; 5], [3.0; 5], [4.0; 5]];
        let labels = [[2.0; 5], [1.0; 5], [4.0; 5], [3.0; 5]];
        let maps = BiasMaps::fit(&preds, &labels, &[0; 4], 1, 0.7);
        assert_eq!(maps.get(0, 0), AffineMap::IDENTITY);
        let maps = BiasMaps::fit(&preds, &labels, &[0; 4], 1, 0.5);
        assert_ne!(maps.get(0, 0), AffineMap::IDENTITY);
    }
}
