//! 48-band log-mel spectrogram and its segmentation into 48×15 patches.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const N_MELS: usize = 48;
pub const WINDOW: usize = 960;
pub const HOP: usize = 480;
pub const N_FFT: usize = 1024;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const F_MAX: f64 = 20_000.0;
/// Power floor applied before the logarithm.
pub const POWER_FLOOR: f64 = 1e-7;
pub const SEG_WIDTH: usize = 15;
pub const SEG_HOP: usize = 4;
/// Values per segment (`N_MELS × SEG_WIDTH`).
pub const SEG_LEN: usize = N_MELS * SEG_WIDTH;

/// Log-floor value taken by cells with no energy.
pub fn log_floor() -> f32 {
    POWER_FLOOR.log10() as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// Row-major `N_MELS × n_frames`.
    data: Vec<f32>,
    n_frames: usize,
}

impl MelSpectrogram {
    pub fn from_data(data: Vec<f32>, n_frames: usize) -> Result<Self> {
        if data.len() != N_MELS * n_frames || n_frames == 0 {
            return Err(Error::Config(format!("mel matrix of {} values for {n_frames} frames", data.len())));
        }
        Ok(Self { data, n_frames })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn value(&self, band: usize, frame: usize) -> f32 {
        self.data[band * self.n_frames + frame]
    }

    pub fn band(&self, band: usize) -> &[f32] {
        &self.data[band * self.n_frames..][..self.n_frames]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame_hop_s(&self) -> f64 {
        HOP as f64 / SAMPLE_RATE as f64
    }

    pub fn window_s(&self) -> f64 {
        WINDOW as f64 / SAMPLE_RATE as f64
    }

    pub fn f_max(&self) -> f64 {
        F_MAX
    }

    /// CSV dump with one row per mel band.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for b in 0..N_MELS {
            let row: Vec<String> = self.band(b).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(",")).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filter edges: `N_MELS + 2` frequencies equally spaced in mel
/// over `[0, F_MAX]`. Filter `b` rises on `[e[b], e[b+1]]` and falls on
/// `[e[b+1], e[b+2]]`.
pub fn mel_band_edges() -> Vec<f64> {
    let top = hz_to_mel(F_MAX);
    (0..N_MELS + 2).map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64)).collect()
}

/// Peak frequency of every filter.
pub fn mel_center_frequencies() -> Vec<f64> {
    mel_band_edges()[1..=N_MELS].to_vec()
}

/// Row-major `N_MELS × N_BINS` filterbank with unit-peak triangles.
pub fn mel_filterbank() -> &'static [f64] {
    static BANK: OnceLock<Vec<f64>> = OnceLock::new();
    BANK.get_or_init(|| {
        let edges = mel_band_edges();
        let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
        let mut bank = vec![0.0; N_MELS * N_BINS];
        for b in 0..N_MELS {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            for k in 0..N_BINS {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                bank[b * N_BINS + k] = w;
            }
        }
        bank
    })
}

/// Periodic Hann window of `WINDOW` samples.
fn hann() -> &'static [f64] {
    static WIN: OnceLock<Vec<f64>> = OnceLock::new();
    WIN.get_or_init(|| {
        (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
            .collect()
    })
}

fn fft() -> Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(N_FFT)).clone()
}

/// Number of frames for a signal of `len` samples.
pub fn frame_count(len: usize) -> usize {
    len / HOP
}

/// Hann-windowed STFT (frames start at `t·HOP`, zero-padded past the end),
/// mel filterbank on the power spectrum, `log10(max(p, POWER_FLOOR))`.
pub fn compute_melspec(buffer: &AudioBuffer) -> Result<MelSpectrogram> {
    if buffer.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate { expected: SAMPLE_RATE, found: buffer.sample_rate });
    }
    let x = &buffer.samples;
    if x.len() < WINDOW {
        return Err(Error::SignalTooShort { samples: x.len(), needed: WINDOW });
    }
    let n_frames = frame_count(x.len());
    let (win, bank, plan) = (hann(), mel_filterbank(), fft());
    let mut data = vec![0f32; N_MELS * n_frames];
    let mut spec = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut scratch = vec![Complex::new(0.0, 0.0); plan.get_inplace_scratch_len()];
    let mut power = vec![0.0; N_BINS];
    for t in 0..n_frames {
        let start = t * HOP;
        for (n, s) in spec.iter_mut().enumerate() {
            let v = if n < WINDOW { x.get(start + n).map_or(0.0, |&v| v as f64 * win[n]) } else { 0.0 };
            *s = Complex::new(v, 0.0);
        }
        plan.process_with_scratch(&mut spec, &mut scratch);
        for (p, s) in power.iter_mut().zip(&spec) {
            *p = s.norm_sqr();
        }
        for b in 0..N_MELS {
            let e: f64 = bank[b * N_BINS..][..N_BINS].iter().zip(&power).map(|(w, p)| w * p).sum();
            data[b * n_frames + t] = e.max(POWER_FLOOR).log10() as f32;
        }
    }
    Ok(MelSpectrogram { data, n_frames })
}

/// Sequence of 48×15 patches, each stored row-major (band, column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSegments {
    /// `len × SEG_LEN` values.
    data: Vec<f32>,
    /// Number of segments carried by the signal; the rest are padding.
    valid_length: usize,
    len: usize,
    pub source_duration_s: f64,
}

impl MelSegments {
    pub fn from_data(data: Vec<f32>, valid_length: usize, source_duration_s: f64) -> Result<Self> {
        if !data.len().is_multiple_of(SEG_LEN) || data.len() / SEG_LEN < valid_length {
            return Err(Error::Config(format!("{} values cannot hold {valid_length} segments", data.len())));
        }
        let len = data.len() / SEG_LEN;
        Ok(Self { data, valid_length, len, source_duration_s })
    }

    /// Segments including padding.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn valid_length(&self) -> usize {
        self.valid_length
    }

    pub fn segment_hop_frames(&self) -> usize {
        SEG_HOP
    }

    pub fn segment(&self, k: usize) -> &[f32] {
        &self.data[k * SEG_LEN..][..SEG_LEN]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Prefix mask marking the valid segments.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.len).map(|k| k < self.valid_length).collect()
    }
}

/// Number of segments for `n_frames` frames.
pub fn segment_count(n_frames: usize) -> usize {
    n_frames.div_ceil(SEG_HOP)
}

/// Segment `k` covers frames `4k−7 ..= 4k+7`; frames outside the
/// spectrogram read as zero.
pub fn segment_melspec(mel: &MelSpectrogram) -> MelSegments {
    let f = mel.n_frames;
    let l = segment_count(f);
    let half = (SEG_WIDTH / 2) as isize;
    let mut data = vec![0f32; l * SEG_LEN];
    for (k, seg) in data.chunks_exact_mut(SEG_LEN).enumerate() {
        let center = (k * SEG_HOP) as isize;
        for c in 0..SEG_WIDTH {
            let t = center - half + c as isize;
            if t < 0 || t as usize >= f {
                continue;
            }
            for b in 0..N_MELS {
                seg[b * SEG_WIDTH + c] = mel.value(b, t as usize);
            }
        }
    }
    let duration = f as f64 * mel.frame_hop_s();
    MelSegments { data, valid_length: l, len: l, source_duration_s: duration }
}

/// Appends all-zero segments up to `target` and returns the validity mask.
pub fn zero_pad_segments(segs: &MelSegments, target: usize) -> Result<(MelSegments, Vec<bool>)> {
    if target < segs.len {
        return Err(Error::PadTarget { len: segs.len, target });
    }
    let mut data = segs.data.clone();
    data.resize(target * SEG_LEN, 0.0);
    let out = MelSegments { data, valid_length: segs.valid_length, len: target, source_duration_s: segs.source_duration_s };
    let mask = out.mask();
    Ok((out, mask))
}

/// Full feature path from audio to segments.
pub fn extract_segments(buffer: &AudioBuffer) -> Result<MelSegments> {
    let mut segs = segment_melspec(&compute_melspec(buffer)?);
    segs.source_duration_s = buffer.duration_s();
    Ok(segs)
}
