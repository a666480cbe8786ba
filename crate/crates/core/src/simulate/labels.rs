//! Rule-based quality labels for degradation chains.
//!
//! Each dimension reads one or more piecewise-linear tables from
//! `labels.json`. A clean chain scores 5 everywhere.

use std::sync::OnceLock;

use serde::Deserialize;

use super::degrade::Degradation;
use crate::scores::QualityScores;

#[derive(Debug, Clone, Deserialize)]
pub struct Table {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Table {
    /// Linear interpolation, clamped to the end values.
    pub fn eval(&self, v: f64) -> f64 {
        let n = self.x.len();
        if v <= self.x[0] {
            return self.y[0];
        }
        if v >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let i = self.x.partition_point(|&b| b <= v);
        let (x0, x1, y0, y1) = (self.x[i - 1], self.x[i], self.y[i - 1], self.y[i]);
        y0 + (y1 - y0) * (v - x0) / (x1 - x0)
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct LabelTables {
    pub noise_snr_db: Table,
    pub bandwidth_hi_hz: Table,
    pub bandwidth_lo_hz: Table,
    pub clip_threshold: Table,
    pub erasure_loss_rate: Table,
    pub gain_abs_db: Table,
}

pub fn tables() -> &'static LabelTables {
    static TABLES: OnceLock<LabelTables> = OnceLock::new();
    TABLES.get_or_init(|| serde_json::from_str(include_str!("labels.json")).expect("embedded label tables parse"))
}

/// Chain parameters folded into one value per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSummary {
    /// Effective SNR from summed relative noise powers; `None` when noiseless.
    pub snr_db: Option<f64>,
    pub hi_hz: f64,
    pub lo_hz: f64,
    /// Product of clip thresholds (a second clip acts on the clipped peak).
    pub clip: f64,
    pub loss_rate: f64,
    pub gain_db: f64,
}

pub fn summarize(chain: &[Degradation]) -> ChainSummary {
    let mut noise_power = 0.0;
    let mut s = ChainSummary { snr_db: None, hi_hz: 20_000.0, lo_hz: 0.0, clip: 1.0, loss_rate: 0.0, gain_db: 0.0 };
    let mut kept = 1.0;
    for d in chain {
        match *d {
            Degradation::AdditiveNoise { snr_db } => noise_power += 10f64.powf(-snr_db / 10.0),
            Degradation::Bandpass { lo_hz, hi_hz } => {
                s.hi_hz = s.hi_hz.min(hi_hz);
                s.lo_hz = s.lo_hz.max(lo_hz);
            }
            Degradation::Clipping { threshold } => s.clip *= threshold,
            Degradation::FrameErasure { loss_rate, .. } => kept *= 1.0 - loss_rate,
            Degradation::GainShift { db } => s.gain_db += db,
        }
    }
    if noise_power > 0.0 {
        s.snr_db = Some(-10.0 * noise_power.log10());
    }
    s.loss_rate = 1.0 - kept;
    s
}

pub fn label_sample(chain: &[Degradation]) -> QualityScores {
    let t = tables();
    let s = summarize(chain);
    let noi = s.snr_db.map_or(5.0, |snr| t.noise_snr_db.eval(snr));
    let norm = |v: f64| (v - 1.0) / 4.0;
    let col = 1.0
        + 4.0
            * norm(t.bandwidth_hi_hz.eval(s.hi_hz))
            * norm(t.bandwidth_lo_hz.eval(s.lo_hz))
            * norm(t.clip_threshold.eval(s.clip));
    let dis = t.erasure_loss_rate.eval(s.loss_rate);
    let lou = t.gain_abs_db.eval(s.gain_db.abs());
    let dims = [noi, col, dis, lou];
    let min = dims.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = dims.iter().sum::<f64>() / 4.0;
    QualityScores { mos: 0.75 * min + 0.25 * mean, noi, col, dis, lou, attention_weights: None }
}
