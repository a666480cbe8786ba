use nisqa_core::features::{MelSegments, SEG_LEN};
use nisqa_core::model::{Framewise, Model, ModelConfig, Pooling, SegmentBatch, TimeDependency, WeightBundle};
use nisqa_core::{Error, Task};
use nisqa_nn::{Mode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_segments(seed: u64, len: usize) -> MelSegments {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..len * SEG_LEN).map(|_| rng.gen_range(-7.0f32..2.0)).collect();
    MelSegments::from_data(data, len, 0.0).unwrap()
}

fn all_variants() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for &td in TimeDependency::ALL {
        for &pool in Pooling::ALL {
            out.push(ModelConfig { lstm_hidden: 16, ..ModelConfig::with_variants(Framewise::Cnn, td, pool) });
        }
    }
    out.push(ModelConfig { ffn_hidden: 64, ..ModelConfig::with_variants(Framewise::Ffn, TimeDependency::Sa, Pooling::Attention) });
    out.push(ModelConfig::with_variants(Framewise::Skip, TimeDependency::Sa, Pooling::Attention));
    out
}

#[test]
fn cnn_trajectory() {
    let model = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
    let seg = random_segments(1, 1);
    let trace = model.cnn_trace(seg.segment(0)).unwrap();
    let shape = |stage: &str| trace.iter().find(|(s, _)| s == stage).unwrap().1.clone();
    assert_eq!(shape("input"), [1, 48, 15]);
    assert_eq!(shape("pool1"), [16, 24, 7]);
    assert_eq!(shape("pool2"), [32, 12, 3]);
    assert_eq!(shape("pool3"), [64, 6, 3]);
    assert_eq!(shape("conv6"), [64, 6, 1]);
    assert_eq!(shape("flatten"), [384]);
}

#[test]
fn framewise_and_td_widths() {
    for (config, d_fw, d) in [
        (ModelConfig::default(), 384, 64),
        (ModelConfig::with_variants(Framewise::Cnn, TimeDependency::Lstm, Pooling::Attention), 384, 256),
        (ModelConfig { ffn_hidden: 32, ..ModelConfig::with_variants(Framewise::Ffn, TimeDependency::SaLstm, Pooling::Avg) }, 384, 256),
        (ModelConfig::with_variants(Framewise::Skip, TimeDependency::LstmSa, Pooling::Max), 720, 64),
    ] {
        let model = Model::<f32>::new(config, 1).unwrap();
        let segs = random_segments(2, 6);
        let batch = SegmentBatch::<f32>::new(&[&segs]).unwrap();
        let mut g = model.graph(Mode::Eval, 0);
        let x = g.input(batch.to_tensor());
        let f = model.framewise_forward(&mut g, x).unwrap();
        assert_eq!(g.dims(f), [6, d_fw]);
        let f = g.reshape(f, [1, 6, d_fw]).unwrap();
        let y = model.td_forward(&mut g, f, batch.mask()).unwrap();
        assert_eq!(g.dims(y), [1, 6, d]);
    }
}

#[test]
fn long_sequence_through_cnn_and_sa() {
    let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let segs = random_segments(3, 250);
    let batch = SegmentBatch::<f32>::new(&[&segs]).unwrap();
    let mut g = model.graph(Mode::Eval, 0);
    let x = g.input(batch.to_tensor());
    let f = model.framewise_forward(&mut g, x).unwrap();
    assert_eq!(g.dims(f), [250, 384]);
    let f = g.reshape(f, [1, 250, 384]).unwrap();
    let y = model.td_forward(&mut g, f, batch.mask()).unwrap();
    assert_eq!(g.dims(y), [1, 250, 64]);
}

fn zero_biases(model: &mut Model<f32>) {
    for p in model.params_mut().iter_mut() {
        if p.name.ends_with(".bias") {
            p.tensor.data_mut().fill(0.0);
        }
    }
}

#[test]
fn zero_input_with_zero_biases_gives_zero_features() {
    let mut model = Model::<f32>::new(ModelConfig::default(), 4).unwrap();
    zero_biases(&mut model);
    let segs = MelSegments::from_data(vec![0.0; 2 * SEG_LEN], 2, 0.0).unwrap();
    let batch = SegmentBatch::<f32>::new(&[&segs]).unwrap();
    let mut g = model.graph(Mode::Eval, 0);
    let x = g.input(batch.to_tensor());
    let f = model.framewise_forward(&mut g, x).unwrap();
    assert!(g.value(f).data().iter().all(|&v| v == 0.0));

    let skip = ModelConfig { use_positional_encoding: false, ..ModelConfig::with_variants(Framewise::Cnn, TimeDependency::Skip, Pooling::Avg) };
    let mut model = Model::<f32>::new(skip, 4).unwrap();
    zero_biases(&mut model);
    let mut g = model.graph(Mode::Eval, 0);
    let f = g.input(Tensor::zeros([1, 5, 384]));
    let y = model.td_forward(&mut g, f, &[true; 5]).unwrap();
    assert_eq!(g.dims(y), [1, 5, 64]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

fn ap_model() -> Model<f64> {
    Model::<f64>::new(ModelConfig::default(), 9).unwrap()
}

#[test]
fn single_step_attention_pooling() {
    let model = ap_model();
    let mut g = model.graph(Mode::Eval, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = g.input(Tensor::from_fn([1, 1, 64], |_| rng.gen_range(-1.0..1.0)));
    let (score, w) = model.pool_forward(&mut g, Task::Mos, y, &[true]).unwrap();
    assert_eq!(g.value(w.unwrap()).data(), [1.0]);
    // score == out.w · y + out.b
    let p = model.params();
    let ow = p.get("head.mos.out.weight").unwrap().tensor.data();
    let ob = p.get("head.mos.out.bias").unwrap().tensor.data()[0];
    let want: f64 = ow.iter().zip(g.value(y).data()).map(|(a, b)| a * b).sum::<f64>() + ob;
    assert!((g.value(score).data()[0] - want).abs() < 1e-12);
}

#[test]
fn identical_columns_pool_like_average() {
    let model = ap_model();
    let avg = {
        let c = ModelConfig { pooling: Pooling::Avg, ..ModelConfig::default() };
        let mut m = Model::<f64>::new(c, 0).unwrap();
        for task in Task::ALL {
            for part in ["weight", "bias"] {
                let name = format!("head.{}.out.{part}", task.key());
                m.params_mut().get_mut(&name).unwrap().tensor = model.params().get(&name).unwrap().tensor.clone();
            }
        }
        m
    };
    let col: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
    let seq = Tensor::from_fn([1, 6, 64], |i| col[i % 64]);
    let mask = [true, true, true, true, false, false];
    for task in Task::ALL {
        let mut g = model.graph(Mode::Eval, 0);
        let y = g.input(seq.clone());
        let (s_ap, w) = model.pool_forward(&mut g, task, y, &mask).unwrap();
        let w = g.value(w.unwrap()).data().to_vec();
        for (i, &wi) in w.iter().enumerate() {
            let want = if mask[i] { 0.25 } else { 0.0 };
            assert!((wi - want).abs() < 1e-12, "{w:?}");
        }
        let mut g2 = avg.graph(Mode::Eval, 0);
        let y2 = g2.input(seq.clone());
        let (s_avg, _) = avg.pool_forward(&mut g2, task, y2, &mask).unwrap();
        assert!((g.value(s_ap).data()[0] - g2.value(s_avg).data()[0]).abs() < 1e-12);
    }
}

#[test]
fn avg_and_max_pooling_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, l, d) = (2, 5, 64);
    let data: Vec<f64> = (0..b * l * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mask = [true, true, true, false, false, true, true, true, true, true];
    for pooling in [Pooling::Avg, Pooling::Max] {
        let model = Model::<f64>::new(ModelConfig { pooling, ..ModelConfig::default() }, 2).unwrap();
        let p = model.params();
        let ow = p.get("head.dis.out.weight").unwrap().tensor.data();
        let ob = p.get("head.dis.out.bias").unwrap().tensor.data()[0];
        let mut g = model.graph(Mode::Eval, 0);
        let y = g.input(Tensor::new([b, l, d], data.clone()).unwrap());
        let (s, _) = model.pool_forward(&mut g, Task::Dis, y, &mask).unwrap();
        for bi in 0..b {
            let valid: Vec<usize> = (0..l).filter(|&t| mask[bi * l + t]).collect();
            let z: Vec<f64> = (0..d)
                .map(|k| {
                    let vals = valid.iter().map(|&t| data[(bi * l + t) * d + k]);
                    match pooling {
                        Pooling::Avg => vals.sum::<f64>() / valid.len() as f64,
                        _ => vals.fold(f64::NEG_INFINITY, f64::max),
                    }
                })
                .collect();
            let want: f64 = z.iter().zip(ow).map(|(a, b)| a * b).sum::<f64>() + ob;
            assert!((g.value(s).data()[bi] - want).abs() < 1e-12, "{pooling}");
        }
    }
}

#[test]
fn constant_sequence_pools_to_itself() {
    for pooling in [Pooling::Avg, Pooling::Max] {
        let model = Model::<f64>::new(ModelConfig { pooling, ..ModelConfig::default() }, 2).unwrap();
        let mut g = model.graph(Mode::Eval, 0);
        let y = g.input(Tensor::full([1, 4, 64], 0.75));
        let z = if pooling == Pooling::Avg { g.masked_mean(y, &[true; 4]) } else { g.masked_max(y, &[true; 4]) }.unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.75));
    }
}

#[test]
fn all_masked_sequences_are_rejected() {
    let model = ap_model();
    let mut g = model.graph(Mode::Eval, 0);
    let y = g.input(Tensor::zeros([1, 3, 64]));
    assert!(model.pool_forward(&mut g, Task::Mos, y, &[false; 3]).is_err());
    assert!(SegmentBatch::<f32>::new(&[&MelSegments::from_data(vec![], 0, 0.0).unwrap()]).is_err());
}

#[test]
fn skip_avg_reduces_to_affine_map_of_constant() {
    let config = ModelConfig {
        use_positional_encoding: false,
        ..ModelConfig::with_variants(Framewise::Skip, TimeDependency::Skip, Pooling::Avg)
    };
    let model = Model::<f64>::new(config, 12).unwrap();
    let c = -3.25f32;
    let segs = MelSegments::from_data(vec![c; 4 * SEG_LEN], 4, 0.0).unwrap();
    let scores = Model::<f64>::predict_segments(&model, &segs).unwrap();
    let p = model.params();
    let pw = p.get("td.proj.weight").unwrap().tensor.data();
    let pb = p.get("td.proj.bias").unwrap().tensor.data();
    for task in Task::ALL {
        let ow = p.get(&format!("head.{}.out.weight", task.key())).unwrap().tensor.data();
        let ob = p.get(&format!("head.{}.out.bias", task.key())).unwrap().tensor.data()[0];
        // score = Σ_j ow_j (c Σ_i pw_ji + pb_j) + ob
        let want: f64 = (0..64)
            .map(|j| ow[j] * (c as f64 * pw[j * SEG_LEN..][..SEG_LEN].iter().sum::<f64>() + pb[j]))
            .sum::<f64>()
            + ob;
        assert!((scores.get(task) - want).abs() < 1e-10, "{task}");
    }
}

#[test]
fn padding_never_changes_predictions() {
    let segs = random_segments(21, 7);
    for config in all_variants() {
        let label = format!("{}/{}/{}", config.framewise, config.td, config.pooling);
        let model = Model::<f32>::new(config, 3).unwrap();
        let base = model.predict_segments(&segs).unwrap();
        for extra in [1, 13, 100] {
            let batch = SegmentBatch::<f32>::with_len(&[&segs], segs.len() + extra).unwrap();
            let mut g = model.graph(Mode::Eval, 0);
            let out = model.forward(&mut g, &batch).unwrap();
            let got = g.value(out.scores).data();
            for task in Task::ALL {
                let diff = (got[task.index()] as f64 - base.get(task)).abs();
                assert!(diff <= 1e-5, "{label}: +{extra} padding moved {task} by {diff}");
            }
        }
    }
}

#[test]
fn batched_prediction_matches_single() {
    let model = Model::<f32>::new(ModelConfig::default(), 6).unwrap();
    let a = random_segments(1, 3);
    let b = random_segments(2, 8);
    let both = model.predict_batch(&[&a, &b]).unwrap();
    for (segs, got) in [(&a, &both[0]), (&b, &both[1])] {
        let single = model.predict_segments(segs).unwrap();
        for task in Task::ALL {
            assert!((single.get(task) - got.get(task)).abs() <= 1e-5);
        }
        let w = got.attention_weights.as_ref().unwrap();
        assert_eq!(w.len(), 5);
        assert!(w.iter().all(|v| v.len() == segs.valid_length()));
    }
}

#[test]
fn head_parameters_only_move_their_task() {
    let segs = random_segments(4, 5);
    let mut model = Model::<f32>::new(ModelConfig::default(), 7).unwrap();
    let before = model.predict_segments(&segs).unwrap();
    for target in Task::ALL {
        let names: Vec<String> =
            model.params().iter().filter(|p| p.name.starts_with(&format!("head.{}.", target.key()))).map(|p| p.name.clone()).collect();
        assert_eq!(names.len(), 6);
        let mut m = model.clone();
        for n in &names {
            m.params_mut().get_mut(n).unwrap().tensor.data_mut().iter_mut().for_each(|v| *v += 0.3);
        }
        let after = m.predict_segments(&segs).unwrap();
        for task in Task::ALL {
            let moved = after.get(task) != before.get(task);
            assert_eq!(moved, task == target, "perturbing {target} heads, {task} moved: {moved}");
        }
    }
    model.params_mut().get_mut("td.proj.bias").unwrap().tensor.data_mut()[0] += 0.5;
    let trunk = model.predict_segments(&segs).unwrap();
    assert!(Task::ALL.iter().all(|&t| trunk.get(t) != before.get(t)));
}

#[test]
fn dropout_only_acts_in_training() {
    let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let segs = random_segments(9, 4);
    let batch = SegmentBatch::<f32>::new(&[&segs]).unwrap();
    let run = |mode, seed| {
        let mut g = model.graph(mode, seed);
        let out = model.forward(&mut g, &batch).unwrap();
        g.value(out.scores).data().to_vec()
    };
    assert_eq!(run(Mode::Eval, 1), run(Mode::Eval, 2));
    assert_ne!(run(Mode::Train, 1), run(Mode::Train, 2));
    assert_eq!(run(Mode::Train, 3), run(Mode::Train, 3));
}

fn bundle() -> WeightBundle {
    WeightBundle::from_model(&Model::<f32>::new(ModelConfig::default(), 11).unwrap())
}

#[test]
fn bundle_bytes_are_stable() {
    let b = bundle();
    let bytes = b.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"NQW1");
    let back = WeightBundle::from_bytes(&bytes).unwrap();
    assert_eq!(back, b);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nqw");
    b.save(&path).unwrap();
    let loaded = WeightBundle::load(&path).unwrap();
    loaded.save(dir.path().join("m2.nqw")).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("m2.nqw")).unwrap());
}

#[test]
fn bundle_corruption_is_detected() {
    let bytes = bundle().to_bytes().unwrap();
    let truncated = &bytes[..bytes.len() - 100];
    assert!(matches!(WeightBundle::from_bytes(truncated), Err(Error::Checksum { .. })));
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x10;
    assert!(matches!(WeightBundle::from_bytes(&flipped), Err(Error::Checksum { .. })));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(WeightBundle::from_bytes(&magic), Err(Error::BadMagic(_))));
    assert!(matches!(WeightBundle::from_bytes(b"NQ"), Err(Error::BadMagic(_))));
}

#[test]
fn foreign_config_names_first_mismatch() {
    let bytes = bundle().to_bytes().unwrap();
    let runtime = ModelConfig { d_tf: 32, ..ModelConfig::default() };
    match WeightBundle::from_bytes_for(&bytes, &runtime) {
        Err(Error::ShapeMismatch { name, expected, found }) => {
            assert_eq!(name, "td.proj.weight");
            assert_eq!(expected, [32, 384]);
            assert_eq!(found, [64, 384]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    let lstm = ModelConfig::with_variants(Framewise::Cnn, TimeDependency::Lstm, Pooling::Attention);
    assert!(matches!(WeightBundle::from_bytes_for(&bytes, &lstm), Err(Error::MissingTensor(n)) if n == "td.lstm.fwd.w_ih"));
}

#[test]
fn bundle_model_predicts_like_source() {
    let model = Model::<f32>::new(ModelConfig::default(), 11).unwrap();
    let back: Model<f32> = WeightBundle::from_model(&model).to_model().unwrap();
    let segs = random_segments(5, 4);
    assert_eq!(model.predict_segments(&segs).unwrap(), back.predict_segments(&segs).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn attention_weights_are_a_distribution(
        seed in any::<u64>(),
        b in 1usize..4,
        l in 1usize..12,
        scale in 0.01f64..30.0,
    ) {
        let model = ap_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<bool> = (0..b * l).map(|i| i % l == 0 || rng.gen_bool(0.6)).collect();
        let mut g = model.graph(Mode::Eval, 0);
        let y = g.input(Tensor::from_fn([b, l, 64], |_| scale * rng.gen_range(-1.0..1.0)));
        let (_, w) = model.pool_forward(&mut g, Task::Col, y, &mask).unwrap();
        let w = g.value(w.unwrap()).data();
        for bi in 0..b {
            let row = &w[bi * l..][..l];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for (t, &v) in row.iter().enumerate() {
                if mask[bi * l + t] { prop_assert!(v >= 0.0) } else { prop_assert_eq!(v, 0.0) }
            }
        }
    }
}
