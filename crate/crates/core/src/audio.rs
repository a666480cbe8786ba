//! WAV decoding, PCM16 encoding and sample-rate conversion to the 48 kHz
//! working rate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Working sample rate of the whole pipeline.
pub const SAMPLE_RATE: u32 = 48_000;
pub const MIN_INPUT_RATE: u32 = 8_000;
pub const MAX_INPUT_RATE: u32 = 48_000;

/// Mono signal, amplitudes nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_path: String,
}

impl AudioBuffer {
    /// A buffer at the working rate.
    pub fn new(samples: Vec<f32>, source_path: impl Into<String>) -> Self {
        Self { samples, sample_rate: SAMPLE_RATE, source_path: source_path.into() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a PCM16 or float32 WAV file with one or two channels at 8–48 kHz
/// and returns it as mono 48 kHz. Channels are averaged; no gain is applied.
pub fn load_audio(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let unsupported = |detail: String| Error::UnsupportedAudio { path: path.to_path_buf(), detail };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        hound::Error::Unsupported => unsupported("encoding not handled by the WAV reader".into()),
        other => Error::MalformedWav { path: path.to_path_buf(), detail: other.to_string() },
    })?;
    let spec = reader.spec();
    if !(1..=2).contains(&spec.channels) {
        return Err(unsupported(format!("{} channels (1 or 2 supported)", spec.channels)));
    }
    if !(MIN_INPUT_RATE..=MAX_INPUT_RATE).contains(&spec.sample_rate) {
        return Err(unsupported(format!(
            "sample rate {} Hz outside [{MIN_INPUT_RATE}, {MAX_INPUT_RATE}]",
            spec.sample_rate
        )));
    }
    let malformed = |e: hound::Error| Error::MalformedWav { path: path.to_path_buf(), detail: e.to_string() };
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(malformed)?,
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().collect::<std::result::Result<_, _>>().map_err(malformed)?
        }
        (format, bits) => return Err(unsupported(format!("{bits}-bit {format:?} samples (PCM16 or float32 supported)"))),
    };
    if interleaved.is_empty() {
        return Err(Error::EmptyAudio { path: path.to_path_buf() });
    }
    let mono: Vec<f32> = if spec.channels == 2 {
        interleaved.chunks_exact(2).map(|f| 0.5 * (f[0] + f[1])).collect()
    } else {
        interleaved
    };
    let samples = resample(&mono, spec.sample_rate, SAMPLE_RATE);
    Ok(AudioBuffer::new(samples, path.to_string_lossy()))
}

/// Quantizes `x` to PCM16 with rounding and saturation.
pub fn to_pcm16(x: f32) -> i16 {
    (x as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a mono PCM16 WAV at the buffer's sample rate.
pub fn write_audio(buffer: &AudioBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &buffer.samples {
        writer.write_sample(to_pcm16(s)).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

const TAPS: usize = 64;
const KAISER_BETA: f64 = 5.0;
const CUTOFF_FRACTION: f64 = 0.9;

/// Polyphase windowed-sinc rate converter for a rational ratio `up/down`.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    /// `up` phases of `TAPS` coefficients each; every phase sums to 1.
    table: Vec<f64>,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut sum, mut term, mut k) = (1.0, 1.0, 1.0);
    while term > 1e-17 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

impl Resampler {
    pub fn new(from_hz: u32, to_hz: u32) -> Self {
        let g = gcd(from_hz as usize, to_hz as usize);
        let (up, down) = (to_hz as usize / g, from_hz as usize / g);
        // Cutoff in cycles per input sample, times two: 0.9 of the lower Nyquist.
        let c = CUTOFF_FRACTION * (to_hz as f64 / from_hz as f64).min(1.0);
        let half = (TAPS / 2) as f64;
        let norm = bessel_i0(KAISER_BETA);
        let mut table = vec![0.0; up * TAPS];
        for (phase, row) in table.chunks_exact_mut(TAPS).enumerate() {
            for (k, h) in row.iter_mut().enumerate() {
                // Distance from the output instant to input sample `base - 31 + k`.
                let tau = phase as f64 / up as f64 + (TAPS / 2 - 1) as f64 - k as f64;
                let r = (tau / half).clamp(-1.0, 1.0);
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
                *h = c * sinc(c * tau) * window;
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|h| *h /= sum);
        }
        Self { up, down, table }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len * self.up).div_ceil(self.down)
    }

    pub fn process(&self, input: &[f32]) -> Vec<f32> {
        let n_out = self.output_len(input.len());
        let mut out = Vec::with_capacity(n_out);
        for n in 0..n_out {
            let pos = n * self.down;
            let (base, phase) = (pos / self.up, pos % self.up);
            let row = &self.table[phase * TAPS..][..TAPS];
            let first = base as isize - (TAPS / 2 - 1) as isize;
            let mut acc = 0.0f64;
            for (k, &h) in row.iter().enumerate() {
                let j = first + k as isize;
                if j >= 0 && (j as usize) < input.len() {
                    acc += h * input[j as usize] as f64;
                }
            }
            out.push(acc as f32);
        }
        out
    }
}

/// Converts `samples` from `from_hz` to `to_hz`; identity when the rates match.
pub fn resample(samples: &[f32], from_hz: u32, to_hz: u32) -> Vec<f32> {
    if from_hz == to_hz {
        return samples.to_vec();
    }
    Resampler::new(from_hz, to_hz).process(samples)
}
