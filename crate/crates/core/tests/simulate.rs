use std::path::Path;

use nisqa_core::simulate::{
    apply_chain, apply_degradation, build_corpus, erasure_pattern, label_sample, write_clean_set, ConditionGrid,
    Degradation, DegradationSpec, GridAxes,
};
use nisqa_core::{AudioBuffer, DatasetManifest, Error};
use proptest::prelude::*;

fn tone_mix(n: usize) -> AudioBuffer {
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / 48_000.0;
            // Syllable-rate envelope so some frames are quiet.
            let env = 0.2 + 0.8 * (2.0 * std::f64::consts::PI * 3.0 * t).sin().abs();
            (env * (0.2 * (2.0 * std::f64::consts::PI * 440.0 * t).sin() + 0.1 * (2.0 * std::f64::consts::PI * 1250.0 * t).sin()))
                as f32
        })
        .collect();
    AudioBuffer::new(samples, "tones")
}

fn apply(buffer: &AudioBuffer, kind: Degradation, seed: u64) -> AudioBuffer {
    apply_degradation(buffer, &DegradationSpec { kind, seed }).unwrap()
}

/// Independent activity detector: 960-sample frames within 40 dB of the
/// loudest one.
fn oracle_active(x: &[f32]) -> Vec<bool> {
    let e: Vec<f64> = x.chunks(960).map(|c| c.iter().map(|&v| (v as f64).powi(2)).sum()).collect();
    let max = e.iter().cloned().fold(0.0, f64::max);
    e.iter().map(|&v| v >= max * 1e-4).collect()
}

fn masked_power(x: &[f64], active: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (c, &a) in x.chunks(960).zip(active) {
        if a {
            sum += c.iter().map(|v| v * v).sum::<f64>();
            n += c.len();
        }
    }
    sum / n as f64
}

#[test]
fn zero_gain_is_bit_identical() {
    let x = tone_mix(48_000);
    let y = apply(&x, Degradation::GainShift { db: 0.0 }, 1);
    assert_eq!(x.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn gain_scales_amplitude() {
    let x = tone_mix(4_800);
    let y = apply(&x, Degradation::GainShift { db: -6.0 }, 0);
    let g = 10f64.powf(-6.0 / 20.0);
    for (a, b) in x.samples.iter().zip(&y.samples) {
        assert!((*a as f64 * g - *b as f64).abs() < 1e-6);
    }
}

#[test]
fn noise_is_mixed_at_the_requested_snr() {
    let x = tone_mix(48_000 * 3);
    for (snr, seed) in [(20.0, 1), (20.0, 2), (0.0, 3), (45.0, 4)] {
        let y = apply(&x, Degradation::AdditiveNoise { snr_db: snr }, seed);
        let active = oracle_active(&x.samples);
        let clean: Vec<f64> = x.samples.iter().map(|&v| v as f64).collect();
        let noise: Vec<f64> = y.samples.iter().zip(&x.samples).map(|(&a, &b)| a as f64 - b as f64).collect();
        let measured = 10.0 * (masked_power(&clean, &active) / masked_power(&noise, &active)).log10();
        assert!((measured - snr).abs() < 0.1, "target {snr}, measured {measured}");
    }
}

#[test]
fn noise_needs_a_signal() {
    let silent = AudioBuffer::new(vec![0.0; 9_600], "silence");
    let r = apply_degradation(&silent, &DegradationSpec { kind: Degradation::AdditiveNoise { snr_db: 10.0 }, seed: 0 });
    assert!(matches!(r, Err(Error::InvalidDegradation(_))));
}

#[test]
fn clipping_caps_at_threshold_times_peak() {
    let x = tone_mix(48_000);
    let peak = x.samples.iter().fold(0f32, |m, v| m.max(v.abs()));
    let y = apply(&x, Degradation::Clipping { threshold: 0.3 }, 0);
    let cap = 0.3 * peak;
    for (a, b) in x.samples.iter().zip(&y.samples) {
        if a.abs() <= cap {
            assert_eq!(a, b);
        } else {
            assert_eq!(b.abs(), cap);
            assert_eq!(a.signum(), b.signum());
        }
    }
}

#[test]
fn bandpass_follows_the_butterworth_magnitude() {
    let (lo, hi) = (300.0, 3400.0);
    for f in [100.0, 200.0, 300.0, 1000.0, 3400.0, 5000.0, 8000.0] {
        let n = 48_000;
        let x = AudioBuffer::new(
            (0..n).map(|i| (0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / 48_000.0).sin()) as f32).collect(),
            "sine",
        );
        let y = apply(&x, Degradation::Bandpass { lo_hz: lo, hi_hz: hi }, 0);
        // Skip the start-up transient.
        let rms = |s: &[f32]| (s[24_000..].iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 24_000.0).sqrt();
        let measured = 20.0 * (rms(&y.samples) / rms(&x.samples)).log10();
        // Analog 4th-order Butterworth pair at bilinear-warped frequencies.
        let warp = |v: f64| (std::f64::consts::PI * v / 48_000.0).tan();
        let analog = -10.0 * (1.0 + (warp(lo) / warp(f)).powi(8)).log10() - 10.0 * (1.0 + (warp(f) / warp(hi)).powi(8)).log10();
        assert!((measured - analog).abs() < 0.5, "{f} Hz: measured {measured:.2} dB, analog {analog:.2} dB");
    }
}

#[test]
fn erasure_zeroes_the_expected_number_of_frames() {
    // 10 s with no zero samples, so zeroed spans are all erasures.
    let x = AudioBuffer::new((0..480_000).map(|i| 0.3 + 0.1 * ((i % 97) as f32 / 97.0)).collect(), "dc");
    let seeds = 40;
    let mut total_10ms = 0usize;
    for seed in 0..seeds {
        let y = apply(&x, Degradation::FrameErasure { loss_rate: 0.1, burst_len: 1.0 }, seed);
        let zero_20ms = y.samples.chunks(960).filter(|c| c.iter().all(|&v| v == 0.0)).count();
        let zero_10ms = y.samples.chunks(480).filter(|c| c.iter().all(|&v| v == 0.0)).count();
        assert_eq!(zero_10ms, 2 * zero_20ms);
        // Binomial(500, 0.1): mean 50, 3σ ≈ 20.
        let sigma = (500.0f64 * 0.1 * 0.9).sqrt();
        assert!((zero_20ms as f64 - 50.0).abs() <= 3.0 * sigma, "seed {seed}: {zero_20ms} frames");
        total_10ms += zero_10ms;
    }
    let mean = total_10ms as f64 / seeds as f64;
    assert!((mean - 100.0).abs() <= 20.0, "mean zeroed 10 ms frames {mean}");
}

#[test]
fn erasure_bursts_have_the_requested_mean_length() {
    let lost = erasure_pattern(400_000, 0.15, 3.0, 11);
    let rate = lost.iter().filter(|&&l| l).count() as f64 / lost.len() as f64;
    let bursts = lost.windows(2).filter(|w| w[1] && !w[0]).count() + lost[0] as usize;
    let mean_burst = lost.iter().filter(|&&l| l).count() as f64 / bursts as f64;
    assert!((rate - 0.15).abs() < 0.005, "{rate}");
    assert!((mean_burst - 3.0).abs() < 0.1, "{mean_burst}");
}

#[test]
fn clean_chain_labels_are_five() {
    let l = label_sample(&[]);
    assert_eq!(l.to_array(), [5.0; 5]);
    let l = label_sample(&[Degradation::GainShift { db: 0.0 }]);
    assert_eq!(l.to_array(), [5.0; 5]);
}

#[test]
fn labels_follow_their_axes() {
    let noisy = |snr| label_sample(&[Degradation::AdditiveNoise { snr_db: snr }]);
    assert!(noisy(10.0).noi < noisy(30.0).noi);
    assert!(noisy(10.0).mos < noisy(30.0).mos);

    let lossy = |r| label_sample(&[Degradation::FrameErasure { loss_rate: r, burst_len: 2.0 }]);
    let (a, b) = (lossy(0.2), lossy(0.05));
    // Table values: 0.2 → 2.0, 0.05 → 3.6.
    assert!((a.dis - 2.0).abs() < 1e-12 && (b.dis - 3.6).abs() < 1e-12);
    assert_eq!(a.col, b.col);
    assert_eq!(a.noi, b.noi);
    // MOS = 0.75·min + 0.25·mean over the four dimensions.
    assert!((a.mos - (0.75 * 2.0 + 0.25 * (2.0 + 15.0) / 4.0)).abs() < 1e-12);

    let narrow = label_sample(&[Degradation::Bandpass { lo_hz: 300.0, hi_hz: 3400.0 }]);
    let wide = label_sample(&[Degradation::Bandpass { lo_hz: 50.0, hi_hz: 7000.0 }]);
    assert!(narrow.col < wide.col && wide.col < 5.0);
    let hard = label_sample(&[Degradation::Clipping { threshold: 0.1 }]);
    let soft = label_sample(&[Degradation::Clipping { threshold: 0.5 }]);
    assert!(hard.col < soft.col);
    assert!(label_sample(&[Degradation::GainShift { db: -20.0 }]).lou < label_sample(&[Degradation::GainShift { db: 3.0 }]).lou);
}

fn arb_degradation() -> impl Strategy<Value = Degradation> {
    prop_oneof![
        (-5.0f64..50.0).prop_map(|snr_db| Degradation::AdditiveNoise { snr_db }),
        (10.0f64..2000.0, 2100.0f64..20000.0).prop_map(|(lo_hz, hi_hz)| Degradation::Bandpass { lo_hz, hi_hz }),
        (0.001f64..1.0).prop_map(|threshold| Degradation::Clipping { threshold }),
        (0.0f64..0.99, 1.0f64..8.0).prop_map(|(loss_rate, burst_len)| Degradation::FrameErasure { loss_rate, burst_len }),
        (-30.0f64..30.0).prop_map(|db| Degradation::GainShift { db }),
    ]
}

proptest! {
    #[test]
    fn labels_stay_in_range(chain in prop::collection::vec(arb_degradation(), 0..6)) {
        let l = label_sample(&chain);
        for v in l.to_array() {
            prop_assert!((1.0..=5.0).contains(&v), "{:?} -> {:?}", chain, l);
        }
        let dims = [l.noi, l.col, l.dis, l.lou];
        prop_assert!(l.mos <= dims.iter().sum::<f64>() / 4.0 + 1e-12);
        prop_assert!(l.mos >= dims.iter().cloned().fold(5.0, f64::min) - 1e-12);
    }

    #[test]
    fn adding_a_degradation_never_raises_a_label(
        chain in prop::collection::vec(arb_degradation(), 0..4),
        extra in arb_degradation(),
    ) {
        // Gain shifts can cancel each other, so only non-gain additions are monotone.
        prop_assume!(!matches!(extra, Degradation::GainShift { .. }));
        let base = label_sample(&chain);
        let mut longer = chain.clone();
        longer.push(extra);
        let worse = label_sample(&longer);
        for (b, w) in base.to_array().iter().zip(worse.to_array()) {
            prop_assert!(w <= b + 1e-12, "{:?} + {:?}: {:?} -> {:?}", chain, extra, base, worse);
        }
    }

    #[test]
    fn degradations_are_deterministic(kind in arb_degradation(), seed in 0u64..1000) {
        let x = tone_mix(9_600);
        let a = apply(&x, kind, seed);
        let b = apply(&x, kind, seed);
        prop_assert_eq!(a.samples, b.samples);
    }
}

fn corpus_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![("manifest.csv".to_string(), std::fs::read(dir.join("manifest.csv")).unwrap())];
    let mut wavs: Vec<_> = std::fs::read_dir(dir.join("wav")).unwrap().map(|e| e.unwrap().path()).collect();
    wavs.sort();
    for p in wavs {
        out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
    }
    out
}

#[test]
fn corpus_counts_reproducibility_and_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    write_clean_set(&clean, 5, 1.0, 7).unwrap();
    let grid = ConditionGrid {
        dataset_name: "grid".into(),
        axes: Some(GridAxes {
            snr_db: vec![Some(0.0), Some(10.0), Some(20.0), Some(30.0), None],
            erasure: vec![None, Some([0.1, 2.0])],
            ..GridAxes::default()
        }),
        ..ConditionGrid::default()
    };
    let a = build_corpus(&clean, &grid, tmp.path().join("a"), 3).unwrap();
    assert_eq!(a.len(), 50);
    let ids: std::collections::BTreeSet<_> = a.rows.iter().map(|r| r.condition_id.unwrap()).collect();
    assert_eq!(ids.len(), 10);

    // Same seed, different thread count: identical bytes.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    pool.install(|| build_corpus(&clean, &grid, tmp.path().join("b"), 3)).unwrap();
    assert_eq!(corpus_bytes(&tmp.path().join("a")), corpus_bytes(&tmp.path().join("b")));

    let read = DatasetManifest::read(tmp.path().join("a/manifest.csv")).unwrap();
    assert_eq!(read.rows, a.rows);
    for r in &read.rows {
        assert!(read.resolve(r).is_file());
    }

    // Within each erasure setting, labels rise with SNR and clean is best.
    for erasure in 0..2 {
        let noi: Vec<f64> = (0..5).map(|s| a.rows[(s * 2 + erasure) * 5].labels.noi).collect();
        let mos: Vec<f64> = (0..5).map(|s| a.rows[(s * 2 + erasure) * 5].labels.mos).collect();
        for w in noi.windows(2) {
            assert!(w[1] > w[0], "{noi:?}");
        }
        for w in mos.windows(2) {
            assert!(w[1] >= w[0], "{mos:?}");
        }
    }

    let c = build_corpus(&clean, &grid, tmp.path().join("c"), 4).unwrap();
    assert_eq!(c.rows, a.rows);
    assert_ne!(corpus_bytes(&tmp.path().join("a")), corpus_bytes(&tmp.path().join("c")));
}

#[test]
fn corpus_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let grid = ConditionGrid { conditions: vec![vec![]], ..ConditionGrid::default() };
    assert!(matches!(build_corpus(&empty, &grid, tmp.path().join("o"), 0), Err(Error::Empty(_))));

    let clean = tmp.path().join("clean");
    write_clean_set(&clean, 1, 0.5, 0).unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(matches!(build_corpus(&clean, &grid, &blocker, 0), Err(Error::Io { .. })));
}

#[test]
fn chains_apply_in_order_with_derived_seeds() {
    let x = tone_mix(19_200);
    let chain = [Degradation::Clipping { threshold: 0.5 }, Degradation::AdditiveNoise { snr_db: 10.0 }];
    let a = apply_chain(&x, &chain, 5).unwrap();
    assert_eq!(a.samples, apply_chain(&x, &chain, 5).unwrap().samples);
    assert_ne!(a.samples, apply_chain(&x, &chain, 6).unwrap().samples);
}
