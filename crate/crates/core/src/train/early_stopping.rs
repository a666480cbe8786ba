/// Tracks the best validation metric and decides when to stop: training
/// ends once `patience` further epochs have passed without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    epoch: usize,
    best_epoch: Option<usize>,
    best: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, epoch: 0, best_epoch: None, best: f64::NEG_INFINITY }
    }

    /// Feeds the metric of the next epoch (1-based). An undefined metric
    /// never counts as an improvement.
    pub fn update(&mut self, metric: Option<f64>) -> StopDecision {
        self.epoch += 1;
        let improved = match metric {
            Some(m) if m.is_finite() => self.best_epoch.is_none() || m > self.best,
            _ => false,
        };
        if improved {
            self.best_epoch = Some(self.epoch);
            self.best = metric.unwrap_or(f64::NEG_INFINITY);
        }
        let stop = self.epoch - self.best_epoch.unwrap_or(0) > self.patience;
        StopDecision { improved, stop }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> Option<f64> {
        self.best_epoch.map(|_| self.best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_at_three_with_patience_two() {
        let mut es = EarlyStopping::new(2);
        let seq = [0.1, 0.2, 0.5, 0.4, 0.5, 0.3];
        let stops: Vec<bool> = seq.iter().map(|&m| es.update(Some(m)).stop).collect();
        // Equal is not better: epochs 4 and 5 do not improve, epoch 5 = 3 + 2
        // is still within patience, so the stop comes at epoch 6.
        assert_eq!(stops, [false, false, false, false, false, true]);
        assert_eq!(es.best_epoch(), Some(3));
        assert_eq!(es.best(), Some(0.5));
    }

    #[test]
    fn undefined_metrics_never_improve() {
        let mut es = EarlyStopping::new(1);
        assert!(!es.update(None).stop);
        assert!(es.update(Some(f64::NAN)).stop);
        assert_eq!(es.best(), None);
    }
}
