use crate::error::{Error, Result};

/// Pearson product-moment correlation with f64 accumulation.
///
/// Errors on length mismatch, fewer than two points, or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metric("correlation undefined for a constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Metric(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Metric(format!("need at least 2 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite value".into()));
    }
    Ok(())
}

/// Least-squares fit `label ≈ a + b·pred` and the RMSE of its residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrderFit {
    pub rmse: f64,
    pub a: f64,
    pub b: f64,
    /// Constant predictions: `b = 0`, `a = mean(label)`.
    pub degenerate: bool,
}

impl FirstOrderFit {
    pub fn map(&self, pred: f64) -> f64 {
        self.a + self.b * pred
    }
}

/// RMSE (divisor n) after mapping predictions onto the label scale.
pub fn rmse_first_order(pred: &[f64], label: &[f64]) -> Result<FirstOrderFit> {
    check_pair(pred, label)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let ml = label.iter().sum::<f64>() / n;
    let (mut spp, mut spl) = (0.0, 0.0);
    for (p, l) in pred.iter().zip(label) {
        spp += (p - mp) * (p - mp);
        spl += (p - mp) * (l - ml);
    }
    let degenerate = spp == 0.0;
    let b = if degenerate { 0.0 } else { spl / spp };
    let a = ml - b * mp;
    let sse: f64 = pred.iter().zip(label).map(|(p, l)| (l - a - b * p).powi(2)).sum();
    Ok(FirstOrderFit { rmse: (sse / n).sqrt(), a, b, degenerate })
}

/// Plain RMSE (divisor n).
pub fn rmse(pred: &[f64], label: &[f64]) -> Result<f64> {
    if pred.len() != label.len() || pred.is_empty() {
        return Err(Error::Metric(format!("bad lengths {} and {}", pred.len(), label.len())));
    }
    Ok((pred.iter().zip(label).map(|(p, l)| (p - l).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}
