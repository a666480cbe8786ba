//! Kernels versus direct loop formulations in f64.

use nisqa_nn::{conv2d, layer_norm, linear, masked_softmax, maxpool2d, scaled_dot_attention, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], ph: usize, pw: usize) -> Vec<f64> {
    let [c_in, h, wd] = *x.dims() else { panic!() };
    let [c_out, _, kh, kw] = *w.dims() else { panic!() };
    let (ho, wo) = (h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1);
    let mut y = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[o];
                for c in 0..c_in {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = oy as isize + i as isize - ph as isize;
                            let ix = ox as isize + j as isize - pw as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x.data()[(c * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c_in + c) * kh + i) * kw + j];
                            }
                        }
                    }
                }
                y[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    y
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(pad_h, pad_w) in &[(0, 0), (1, 1), (1, 0)] {
        let x = random(&mut rng, &[2, 5, 5]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let b = random(&mut rng, &[3]);
        let y = conv2d(&x, &w, Some(&b), pad_h, pad_w).unwrap();
        let want = conv_oracle(&x, &w, b.data(), pad_h, pad_w);
        for (a, e) in y.data().iter().zip(&want) {
            assert!((a - e).abs() <= 1e-12, "pad ({pad_h},{pad_w}): {a} vs {e}");
        }
    }
}

#[test]
fn batched_conv_equals_per_sample_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[4, 3, 6, 5]);
    let w = random(&mut rng, &[2, 3, 3, 3]);
    let y = conv2d(&x, &w, None, 1, 1).unwrap();
    for n in 0..4 {
        let xs = Tensor::new([3, 6, 5], x.data()[n * 90..(n + 1) * 90].to_vec()).unwrap();
        let ys = conv_oracle(&xs, &w, &[0.0, 0.0], 1, 1);
        for (a, e) in y.data()[n * 60..(n + 1) * 60].iter().zip(&ys) {
            assert!((a - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn maxpool_matches_block_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[8, 8]);
    let y = maxpool2d(&x, 2, 2, 2, 2).unwrap();
    assert_eq!(y.dims(), &[4, 4]);
    for by in 0..4 {
        for bx in 0..4 {
            let mut m = f64::NEG_INFINITY;
            for i in 0..2 {
                for j in 0..2 {
                    m = m.max(x.data()[(2 * by + i) * 8 + 2 * bx + j]);
                }
            }
            assert_eq!(y.data()[by * 4 + bx], m);
        }
    }
}

#[test]
fn linear_matches_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[3, 7, 11]);
    let w = random(&mut rng, &[5, 11]);
    let b = random(&mut rng, &[5]);
    let y = linear(&x, &w, Some(&b)).unwrap();
    assert_eq!(y.dims(), &[3, 7, 5]);
    for r in 0..21 {
        for o in 0..5 {
            let dot: f64 = (0..11).map(|i| x.data()[r * 11 + i] * w.data()[o * 11 + i]).sum::<f64>() + b.data()[o];
            assert!((y.data()[r * 5 + o] - dot).abs() <= 1e-12);
        }
    }
}

#[test]
fn softmax_matches_exp_over_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.gen_range(1..20);
        let s = Tensor::<f64>::from_fn([n], |_| rng.gen_range(-10.0..10.0));
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        mask[rng.gen_range(0..n)] = true;
        let p = masked_softmax(&s, &mask).unwrap();
        let z: f64 = (0..n).filter(|&i| mask[i]).map(|i| s.data()[i].exp()).sum();
        for i in 0..n {
            let want = if mask[i] { s.data()[i].exp() / z } else { 0.0 };
            assert!((p.data()[i] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn attention_matches_explicit_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (l, d) = (5, 4);
    let q = random(&mut rng, &[l, d]);
    let k = random(&mut rng, &[l, d]);
    let v = random(&mut rng, &[l, d]);
    let mask = [true, false, true, true, false];
    let o = scaled_dot_attention(&q, &k, &v, &mask).unwrap();
    for i in 0..l {
        let scores: Vec<f64> = (0..l)
            .map(|j| (0..d).map(|c| q.data()[i * d + c] * k.data()[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = (0..l).filter(|&j| mask[j]).map(|j| scores[j].exp()).sum();
        for c in 0..d {
            let want: f64 = (0..l).filter(|&j| mask[j]).map(|j| scores[j].exp() / z * v.data()[j * d + c]).sum();
            assert!((o.data()[i * d + c] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn layer_norm_matches_two_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[6, 9]);
    let g = random(&mut rng, &[9]);
    let b = random(&mut rng, &[9]);
    let y = layer_norm(&x, &g, &b).unwrap();
    for r in 0..6 {
        let row = &x.data()[r * 9..(r + 1) * 9];
        let mean = row.iter().sum::<f64>() / 9.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        for i in 0..9 {
            let want = (row[i] - mean) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i];
            assert!((y.data()[r * 9 + i] - want).abs() <= 1e-12);
        }
    }
    let unit = layer_norm(&x, &Tensor::full([9], 1.0), &Tensor::zeros([9])).unwrap();
    for r in 0..6 {
        let mean: f64 = unit.data()[r * 9..(r + 1) * 9].iter().sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn masked_softmax_is_a_distribution(
        scores in prop::collection::vec(-1e3f64..1e3, 1..40),
        seed in any::<u64>(),
    ) {
        let n = scores.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        mask[rng.gen_range(0..n)] = true;
        let p = masked_softmax(&Tensor::new([n], scores).unwrap(), &mask).unwrap();
        let total: f64 = p.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (v, m) in p.data().iter().zip(&mask) {
            if *m { prop_assert!(*v >= 0.0) } else { prop_assert_eq!(*v, 0.0) }
        }
    }
}
