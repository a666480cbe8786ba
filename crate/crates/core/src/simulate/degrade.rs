use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Frame length used for SNR measurement and packet erasure (20 ms).
pub const FRAME: usize = 960;

/// Frames quieter than this, relative to the loudest frame, are inactive.
const ACTIVITY_THRESHOLD_DB: f64 = -40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Degradation {
    /// Gaussian noise at `snr_db` relative to the active-speech level.
    AdditiveNoise { snr_db: f64 },
    /// 4th-order Butterworth high-pass at `lo_hz` and low-pass at `hi_hz`.
    Bandpass { lo_hz: f64, hi_hz: f64 },
    /// Hard clipping at `threshold` times the signal peak.
    Clipping { threshold: f64 },
    /// Two-state burst loss of 20 ms frames with stationary loss
    /// probability `loss_rate` and mean burst length `burst_len` frames.
    FrameErasure { loss_rate: f64, burst_len: f64 },
    GainShift { db: f64 },
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidDegradation(msg));
        match *self {
            Degradation::AdditiveNoise { snr_db } if !(-5.0..=50.0).contains(&snr_db) => {
                bad(format!("snr_db {snr_db} outside [-5, 50]"))
            }
            Degradation::Bandpass { lo_hz, hi_hz } if !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz <= 20_000.0) => {
                bad(format!("band [{lo_hz}, {hi_hz}] Hz must satisfy 0 < lo < hi <= 20000"))
            }
            Degradation::Clipping { threshold } if !(threshold > 0.0 && threshold <= 1.0) => {
                bad(format!("clipping threshold {threshold} outside (0, 1]"))
            }
            Degradation::FrameErasure { loss_rate, .. } if !(0.0..1.0).contains(&loss_rate) => {
                bad(format!("loss_rate {loss_rate} outside [0, 1)"))
            }
            Degradation::FrameErasure { burst_len, .. } if !(burst_len >= 1.0 && burst_len.is_finite()) => {
                bad(format!("burst_len {burst_len} must be at least 1 frame"))
            }
            Degradation::GainShift { db } if !(db.abs() <= 30.0) => bad(format!("gain {db} dB outside [-30, 30]")),
            _ => Ok(()),
        }
    }
}

/// One degradation with the seed driving its randomness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    #[serde(flatten)]
    pub kind: Degradation,
    #[serde(default)]
    pub seed: u64,
}

pub fn apply_degradation(buffer: &AudioBuffer, spec: &DegradationSpec) -> Result<AudioBuffer> {
    spec.kind.validate()?;
    let x = &buffer.samples;
    let samples = match spec.kind {
        Degradation::GainShift { db } => {
            if db == 0.0 {
                x.clone()
            } else {
                let g = 10f64.powf(db / 20.0);
                x.iter().map(|&v| (v as f64 * g) as f32).collect()
            }
        }
        Degradation::Clipping { threshold } => {
            let t = threshold as f32 * x.iter().fold(0f32, |m, v| m.max(v.abs()));
            x.iter().map(|&v| v.clamp(-t, t)).collect()
        }
        Degradation::AdditiveNoise { snr_db } => {
            let noise = noise_for_snr(x, snr_db, spec.seed)?;
            x.iter().zip(&noise).map(|(a, b)| a + b).collect()
        }
        Degradation::Bandpass { lo_hz, hi_hz } => bandpass(x, lo_hz, hi_hz, buffer.sample_rate as f64),
        Degradation::FrameErasure { loss_rate, burst_len } => {
            let lost = erasure_pattern(x.len().div_ceil(FRAME), loss_rate, burst_len, spec.seed);
            let mut y = x.clone();
            for (frame, chunk) in y.chunks_mut(FRAME).enumerate() {
                if lost[frame] {
                    chunk.fill(0.0);
                }
            }
            y
        }
    };
    Ok(AudioBuffer { samples, sample_rate: buffer.sample_rate, source_path: buffer.source_path.clone() })
}

/// Applies a chain in order; stage `k` uses seed `derive_seed(&[seed, k])`.
pub fn apply_chain(buffer: &AudioBuffer, chain: &[Degradation], seed: u64) -> Result<AudioBuffer> {
    let mut out = buffer.clone();
    for (k, &kind) in chain.iter().enumerate() {
        out = apply_degradation(&out, &DegradationSpec { kind, seed: derive_seed(&[seed, k as u64]) })?;
    }
    Ok(out)
}

/// SplitMix64 fold of `parts` into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state ^= p;
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

/// Indices of 20 ms frames whose energy is within 40 dB of the loudest frame.
pub fn active_frames(x: &[f32]) -> Vec<usize> {
    let energy: Vec<f64> = x.chunks(FRAME).map(|c| c.iter().map(|&v| v as f64 * v as f64).sum()).collect();
    let peak = energy.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return Vec::new();
    }
    let floor = peak * 10f64.powf(ACTIVITY_THRESHOLD_DB / 10.0);
    (0..energy.len()).filter(|&i| energy[i] >= floor).collect()
}

/// Mean power over the given frames.
pub fn active_power(x: &[f32], frames: &[usize]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for &f in frames {
        for &v in x.chunks(FRAME).nth(f).unwrap_or(&[]) {
            sum += v as f64 * v as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Seeded Gaussian noise scaled so that, over the signal's active frames,
/// signal power / noise power equals `snr_db`.
pub fn noise_for_snr(x: &[f32], snr_db: f64, seed: u64) -> Result<Vec<f32>> {
    let frames = active_frames(x);
    if frames.is_empty() {
        return Err(Error::InvalidDegradation("additive noise needs a signal with active speech".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..x.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let signal = active_power(x, &frames);
    let (mut sum, mut n) = (0.0, 0usize);
    for &f in &frames {
        for &v in raw.chunks(FRAME).nth(f).unwrap_or(&[]) {
            sum += v * v;
            n += 1;
        }
    }
    let gain = (signal / 10f64.powf(snr_db / 10.0) / (sum / n as f64)).sqrt();
    Ok(raw.iter().map(|v| (v * gain) as f32).collect())
}

/// Lost-frame flags from a two-state Markov chain started in its stationary
/// distribution.
pub fn erasure_pattern(n_frames: usize, loss_rate: f64, burst_len: f64, seed: u64) -> Vec<bool> {
    if loss_rate <= 0.0 {
        return vec![false; n_frames];
    }
    // Bad→good probability q sets the mean burst; good→bad p sets the loss.
    let mut q = 1.0 / burst_len;
    let mut p = loss_rate * q / (1.0 - loss_rate);
    if p > 1.0 {
        // Loss this high needs longer bursts than requested.
        p = 1.0;
        q = (1.0 - loss_rate) / loss_rate;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lost = rng.gen_bool(loss_rate);
    (0..n_frames)
        .map(|i| {
            if i > 0 {
                lost = if lost { !rng.gen_bool(q) } else { rng.gen_bool(p) };
            }
            lost
        })
        .collect()
}

/// Direct-form-II-transposed second-order section.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn new(high_pass: bool, f0: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b = if high_pass {
            [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0]
        } else {
            [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0]
        };
        Self { b: b.map(|v| v / a0), a: [-2.0 * cos / a0, (1.0 - alpha) / a0] }
    }

    fn run(&self, x: &mut [f64]) {
        let (mut s1, mut s2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let y = self.b[0] * *v + s1;
            s1 = self.b[1] * *v - self.a[0] * y + s2;
            s2 = self.b[2] * *v - self.a[1] * y;
            *v = y;
        }
    }
}

/// Pole-pair quality factors of a 4th-order Butterworth response.
const BUTTERWORTH_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_8];

fn bandpass(x: &[f32], lo_hz: f64, hi_hz: f64, fs: f64) -> Vec<f32> {
    let mut y: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    for q in BUTTERWORTH_Q {
        Biquad::new(true, lo_hz, q, fs).run(&mut y);
    }
    // A low-pass at or above Nyquist would be a no-op.
    if hi_hz < 0.5 * fs {
        for q in BUTTERWORTH_Q {
            Biquad::new(false, hi_hz, q, fs).run(&mut y);
        }
    }
    y.into_iter().map(|v| v as f32).collect()
}

/// Magnitude response of the bandpass pair at `f` (for tests and docs).
pub fn bandpass_gain(lo_hz: f64, hi_hz: f64, f: f64) -> f64 {
    let fs = SAMPLE_RATE as f64;
    let w = 2.0 * std::f64::consts::PI * f / fs;
    let z1 = (w.cos(), -w.sin());
    let z2 = ((2.0 * w).cos(), -(2.0 * w).sin());
    let mut g = 1.0;
    let mut sections: Vec<Biquad> = BUTTERWORTH_Q.iter().map(|&q| Biquad::new(true, lo_hz, q, fs)).collect();
    if hi_hz < 0.5 * fs {
        sections.extend(BUTTERWORTH_Q.iter().map(|&q| Biquad::new(false, hi_hz, q, fs)));
    }
    for s in sections {
        let num = (s.b[0] + s.b[1] * z1.0 + s.b[2] * z2.0, s.b[1] * z1.1 + s.b[2] * z2.1);
        let den = (1.0 + s.a[0] * z1.0 + s.a[1] * z2.0, s.a[0] * z1.1 + s.a[1] * z2.1);
        g *= (num.0.hypot(num.1)) / (den.0.hypot(den.1));
    }
    g
}
