//! Speech-like clean signals: harmonic voiced syllables shaped by vowel
//! formants, occasional fricative onsets and short pauses.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::degrade::{active_frames, active_power, derive_seed};
use crate::audio::{write_audio, AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Active-speech level of generated signals, in dB relative to full scale.
pub const ACTIVE_LEVEL_DBFS: f64 = -26.0;

/// First three formants (Hz) of five cardinal vowels.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
];

const FORMANT_BANDWIDTH: [f64; 3] = [80.0, 110.0, 160.0];
const MAX_HARMONIC_HZ: f64 = 8_000.0;

#[derive(Debug, Clone, Copy)]
pub struct Talker {
    pub f0_hz: f64,
    /// Vocal-tract scaling applied to every formant.
    pub formant_scale: f64,
    pub syllables_per_s: f64,
}

impl Talker {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            f0_hz: rng.gen_range(90.0..230.0),
            formant_scale: rng.gen_range(0.85..1.2),
            syllables_per_s: rng.gen_range(3.5..5.5),
        }
    }
}

/// Resonance magnitude of a formant filter at `f`, unit gain at DC.
fn formant_gain(f: f64, centre: f64, bandwidth: f64) -> f64 {
    let r = f / centre;
    let q = centre / bandwidth;
    1.0 / ((1.0 - r * r).powi(2) + (r / q).powi(2)).sqrt()
}

/// Generates `duration_s` seconds of speech-like audio at 48 kHz,
/// normalised to [`ACTIVE_LEVEL_DBFS`] over its active frames.
pub fn synthesize_speech(talker: &Talker, duration_s: f64, seed: u64) -> Vec<f32> {
    let fs = SAMPLE_RATE as f64;
    let n = (duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0f64; n];
    let mut phase = 0.0f64;
    let mut start = (rng.gen_range(0.05..0.2) * fs) as usize;
    while start < n {
        let len = ((rng.gen_range(0.7..1.3) / talker.syllables_per_s) * fs) as usize;
        let end = (start + len).min(n);
        if rng.gen_bool(0.12) {
            // Pause: keep the phase running so the next syllable stays smooth.
            phase += 2.0 * std::f64::consts::PI * talker.f0_hz * (end - start) as f64 / fs;
            start = end;
            continue;
        }
        let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
        let formants: Vec<f64> = vowel.iter().map(|f| f * talker.formant_scale).collect();
        let pitch_start = talker.f0_hz * rng.gen_range(0.9..1.15);
        let pitch_end = pitch_start * rng.gen_range(0.8..1.05);
        let loudness = rng.gen_range(0.5..1.0);
        let n_harm = (MAX_HARMONIC_HZ / pitch_start.max(pitch_end)) as usize;
        let amps: Vec<f64> = (1..=n_harm)
            .map(|k| {
                let f = k as f64 * pitch_start;
                // Glottal roll-off plus lip radiation: -6 dB/octave overall.
                let shape: f64 = formants.iter().zip(FORMANT_BANDWIDTH).map(|(&c, b)| formant_gain(f, c, b)).product();
                shape / k as f64
            })
            .collect();

        let fricative = if rng.gen_bool(0.35) { (rng.gen_range(0.04..0.1) * fs) as usize } else { 0 };
        let voiced_start = (start + fricative).min(end);
        let mut prev = [0.0f64; 2];
        for (i, y) in out[start..voiced_start].iter_mut().enumerate() {
            // Twice-differenced white noise: a crude high-pass hiss.
            let w: f64 = rng.gen_range(-1.0..1.0);
            let hp = w - 2.0 * prev[0] + prev[1];
            prev = [w, prev[0]];
            let env = (std::f64::consts::PI * i as f64 / fricative as f64).sin();
            *y += 0.02 * loudness * env * hp;
        }

        let voiced = end - voiced_start;
        for (i, y) in out[voiced_start..end].iter_mut().enumerate() {
            let t = i as f64 / voiced.max(1) as f64;
            let f0 = pitch_start + (pitch_end - pitch_start) * t;
            phase += 2.0 * std::f64::consts::PI * f0 / fs;
            let env = (std::f64::consts::PI * t).sin().powf(0.6);
            // sin(kθ) by the Chebyshev recurrence.
            let (s1, c1) = phase.sin_cos();
            let (mut s_prev, mut s_cur) = (0.0, s1);
            let mut acc = 0.0;
            for &a in &amps {
                acc += a * s_cur;
                let next = 2.0 * c1 * s_cur - s_prev;
                s_prev = s_cur;
                s_cur = next;
            }
            *y += loudness * env * acc;
        }
        phase %= 2.0 * std::f64::consts::PI;
        start = end + (rng.gen_range(0.0..0.06) * fs) as usize;
    }

    let samples: Vec<f32> = out.iter().map(|&v| v as f32).collect();
    let frames = active_frames(&samples);
    let power = active_power(&samples, &frames);
    if power == 0.0 {
        return samples;
    }
    let gain = (10f64.powf(ACTIVE_LEVEL_DBFS / 10.0) / power).sqrt();
    out.iter().map(|&v| (v * gain) as f32).collect()
}

/// Writes `n_files` clean signals of `duration_s` seconds, one talker each,
/// as `clean_NNNN.wav` in `dir`.
pub fn write_clean_set(dir: impl AsRef<Path>, n_files: usize, duration_s: f64, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if n_files == 0 {
        return Err(Error::Empty("clean set needs at least one file".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..n_files)
        .map(|i| {
            let file_seed = derive_seed(&[seed, i as u64]);
            let talker = Talker::random(&mut ChaCha8Rng::seed_from_u64(file_seed));
            let path = dir.join(format!("clean_{i:04}.wav"));
            let samples = synthesize_speech(&talker, duration_s, file_seed);
            write_audio(&AudioBuffer::new(samples, path.display().to_string()), &path)?;
            Ok(path)
        })
        .collect()
}
