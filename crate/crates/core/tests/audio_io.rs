use std::f64::consts::PI;
use std::path::Path;

use nisqa_core::audio::{load_audio, resample, write_audio, AudioBuffer};
use nisqa_core::Error;
use proptest::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn write_wav<S: hound::Sample + Copy>(path: &Path, rate: u32, channels: u16, bits: u16, format: hound::SampleFormat, data: &[S]) {
    let spec = hound::WavSpec { channels, sample_rate: rate, bits_per_sample: bits, sample_format: format };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in data {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

fn rms(x: &[f32]) -> f64 {
    (x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64).sqrt()
}

#[test]
fn native_rate_file_keeps_sample_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ten.wav");
    let data: Vec<i16> = (0..480_000).map(|i| ((i % 200) as i16 - 100) * 50).collect();
    write_wav(&path, 48_000, 1, 16, hound::SampleFormat::Int, &data);
    let buf = load_audio(&path).unwrap();
    assert_eq!(buf.len(), 480_000);
    assert_eq!(buf.sample_rate, 48_000);
    assert!((buf.duration_s() - 10.0).abs() < 1.0 / 48_000.0);
    assert_eq!(buf.samples[1], data[1] as f32 / 32768.0);
}

#[test]
fn upsampled_tone_keeps_its_frequency() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tone8k.wav");
    let data: Vec<i16> = (0..8000).map(|n| ((2.0 * PI * 440.0 * n as f64 / 8000.0).sin() * 16000.0) as i16).collect();
    write_wav(&path, 8000, 1, 16, hound::SampleFormat::Int, &data);
    let buf = load_audio(&path).unwrap();
    assert_eq!(buf.len(), 48_000);
    // 48000-point FFT over one second: bin index equals frequency in Hz.
    let mut spec: Vec<Complex<f64>> = buf.samples.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(spec.len()).process(&mut spec);
    let peak = (0..24_000).max_by(|&a, &b| spec[a].norm().total_cmp(&spec[b].norm())).unwrap();
    assert!((peak as i64 - 440).abs() <= 1, "peak at bin {peak}");
}

#[test]
fn resampling_preserves_level_below_3400_hz() {
    let tones = [(180.0, 0.3), (650.0, 0.2), (1400.0, 0.25), (2500.0, 0.15), (3300.0, 0.2)];
    let x: Vec<f32> = (0..16_000)
        .map(|n| {
            let t = n as f64 / 8000.0;
            tones.iter().enumerate().map(|(i, &(f, a))| a * (2.0 * PI * f * t + i as f64).sin()).sum::<f64>() as f32
        })
        .collect();
    let y = resample(&x, 8000, 48_000);
    assert_eq!(y.len(), 96_000);
    // Ignore the filter's edge transients.
    let rin = rms(&x[800..15_200]);
    let rout = rms(&y[4800..91_200]);
    let db = 20.0 * (rout / rin).log10();
    assert!(db.abs() < 0.1, "level change {db} dB");
}

#[test]
fn downsampling_is_supported() {
    let x = vec![0.25f32; 44_100];
    let y = resample(&x, 44_100, 48_000);
    assert_eq!(y.len(), 48_000);
    assert!((y[24_000] - 0.25).abs() < 1e-6);
}

#[test]
fn opposite_stereo_channels_cancel() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stereo.wav");
    let data: Vec<i16> = (0..4800).flat_map(|i| {
        let v = ((i * 37) % 20000) as i16 - 10000;
        [v, -v]
    }).collect();
    write_wav(&path, 48_000, 2, 16, hound::SampleFormat::Int, &data);
    let buf = load_audio(&path).unwrap();
    assert_eq!(buf.len(), 4800);
    assert!(buf.samples.iter().all(|&v| v == 0.0));
}

#[test]
fn float_wav_is_read_unscaled() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("float.wav");
    write_wav(&path, 48_000, 1, 32, hound::SampleFormat::Float, &[0.5f32, -0.75, 1.5]);
    assert_eq!(load_audio(&path).unwrap().samples, [0.5, -0.75, 1.5]);
}

#[test]
fn load_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.wav");
    let data: Vec<i16> = (0..2205).map(|i| (i * 13 % 3000) as i16).collect();
    write_wav(&path, 22_050, 1, 16, hound::SampleFormat::Int, &data);
    assert_eq!(load_audio(&path).unwrap(), load_audio(&path).unwrap());
}

#[test]
fn failures_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let missing = load_audio(dir.path().join("nope.wav")).unwrap_err();
    assert!(matches!(missing, Error::Io { .. }), "{missing}");

    let garbage = dir.path().join("garbage.wav");
    std::fs::write(&garbage, b"definitely not a riff file").unwrap();
    assert!(matches!(load_audio(&garbage).unwrap_err(), Error::MalformedWav { .. }));

    let deep = dir.path().join("pcm24.wav");
    write_wav(&deep, 48_000, 1, 24, hound::SampleFormat::Int, &[1i32, 2, 3]);
    assert!(matches!(load_audio(&deep).unwrap_err(), Error::UnsupportedAudio { .. }));

    let slow = dir.path().join("slow.wav");
    write_wav(&slow, 4000, 1, 16, hound::SampleFormat::Int, &[1i16, 2, 3]);
    assert!(matches!(load_audio(&slow).unwrap_err(), Error::UnsupportedAudio { .. }));

    let empty = dir.path().join("empty.wav");
    write_wav::<i16>(&empty, 48_000, 1, 16, hound::SampleFormat::Int, &[]);
    assert!(matches!(load_audio(&empty).unwrap_err(), Error::EmptyAudio { .. }));
}

#[test]
fn write_to_missing_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let err = write_audio(&AudioBuffer::new(vec![0.0; 10], ""), dir.path().join("no/such/dir.wav")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn silence_and_full_scale_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rt.wav");
    write_audio(&AudioBuffer::new(vec![0.0; 48_000], ""), &path).unwrap();
    let back = load_audio(&path).unwrap();
    assert_eq!(back.len(), 48_000);
    assert!(back.samples.iter().all(|&v| v == 0.0));

    write_audio(&AudioBuffer::new(vec![1.0; 100], ""), &path).unwrap();
    let back = load_audio(&path).unwrap();
    assert!(back.samples.iter().all(|&v| (v - 1.0).abs() <= 1.0 / 32768.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn pcm16_round_trip_within_one_lsb(samples in prop::collection::vec(-1.0f32..1.0, 1..2000)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.wav");
        let buf = AudioBuffer::new(samples, "");
        write_audio(&buf, &path).unwrap();
        let back = load_audio(&path).unwrap();
        prop_assert_eq!(back.len(), buf.len());
        for (a, b) in back.samples.iter().zip(&buf.samples) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }
}
