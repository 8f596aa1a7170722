//! Finite-difference checks of every primitive and composite block, plus a
//! naive-loop convolution reference.

use adafilter_core::gradcheck::{finite_diff_check, suite, FdOptions};
use adafilter_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 50;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

macro_rules! cases {
    ($($test:ident => $name:literal),* $(,)?) => {$(
        #[test]
        fn $test() {
            let s = suite::run_case($name, TRIALS, 0).unwrap();
            assert_eq!(s.trials, TRIALS);
            assert!(s.passed(), "{}: {} of {} trials failed, max relative error {:e} (tol {:e})", s.name, s.failures, s.trials, s.max_rel_error, s.tol);
        }
    )*};
}

cases! {
    add => "add",
    sub => "sub",
    mul => "mul",
    scale => "scale",
    sum => "sum",
    mean => "mean",
    matmul => "matmul",
    linear => "linear",
    sigmoid => "sigmoid",
    tanh => "tanh",
    relu => "relu",
    conv2d => "conv2d",
    global_avg_pool => "global_avg_pool",
    max_pool => "max_pool",
    channel_mean => "channel_mean",
    channel_var => "channel_var",
    channel_affine => "channel_affine",
    batch_norm => "batch_norm",
    batch_norm_masked => "batch_norm_masked",
    channel_mix => "channel_mix",
    reshape => "reshape",
    cross_entropy => "cross_entropy",
    threshold_straight_through => "threshold",
    conv_bn_composite => "conv_bn",
    filter_select_composite => "filter_select",
    gated_bn_composite => "gated_bn",
    gated_block_composite => "gated_block",
    lstm_eight_steps => "lstm_chain",
    gate_pipeline_straight_through => "gate_pipeline",
}

#[test]
fn suite_lists_every_case_once() {
    let all: Vec<&str> = suite::PRIMITIVES.iter().chain(&suite::COMPOSITES).copied().collect();
    let mut sorted = all.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), all.len());
    assert!(suite::run_case("softmax", 1, 0).is_err());
}

/// Direct six-loop cross-correlation.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let [n, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, _, k, _] = w.shape().try_into().unwrap();
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for u in 0..k {
                            for v in 0..k {
                                let (r, s) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < wd {
                                    acc += x.data()[((b * ci + c) * h + r as usize) * wd + s as usize] * w.data()[((o * ci + c) * k + u) * k + v];
                                }
                            }
                        }
                    }
                    out[((b * co + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, &[2, 3, 5, 5]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    let mut g = Graph::new();
    let (xv, wv) = (g.leaf(x.clone()), g.leaf(w.clone()));
    let y = g.conv2d(xv, wv, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 5, 5]);
    for (a, b) in g.value(y).data().iter().zip(naive_conv(&x, &w, 1, 1)) {
        assert!((a - b).abs() < 1e-12);
    }
    // A strided, unpadded case as well.
    let x = random(&mut rng, &[1, 2, 6, 7]);
    let w = random(&mut rng, &[3, 2, 2, 2]);
    let (xv, wv) = (g.leaf(x.clone()), g.leaf(w.clone()));
    let y = g.conv2d(xv, wv, 2, 0).unwrap();
    for (a, b) in g.value(y).data().iter().zip(naive_conv(&x, &w, 2, 0)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn hadamard_gradient_is_upstream_times_other() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b, r) = (random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]));
    let (bc, rc) = (b.clone(), r.clone());
    let f = move |g: &mut Graph, v: &[adafilter_core::Var]| {
        let b = g.constant(&[3, 4], bc.data().to_vec())?;
        let r = g.constant(&[3, 4], rc.data().to_vec())?;
        let p = g.mul(v[0], b)?;
        let p = g.mul(p, r)?;
        g.sum(p)
    };
    let opts = FdOptions {
        tol: 1e-6,
        ..FdOptions::default()
    };
    let report = finite_diff_check(f, &[a], opts).unwrap();
    assert!(report.passed(), "{}", report.max_rel_error());
    for (i, &got) in report.params[0].analytic.iter().enumerate() {
        assert_eq!(got, r.data()[i] * b.data()[i]);
    }
}

#[test]
fn sigmoid_derivative_at_zero() {
    let f = |g: &mut Graph, v: &[adafilter_core::Var]| {
        let s = g.sigmoid(v[0])?;
        g.sum(s)
    };
    let report = finite_diff_check(f, &[Tensor::new(&[1], vec![0.0]).unwrap()], FdOptions::default()).unwrap();
    let p = &report.params[0];
    assert_eq!(p.analytic[0], 0.25);
    assert!((p.numeric[0] - 0.25).abs() < 1e-8);
}

#[test]
fn sum_has_exact_unit_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = |g: &mut Graph, v: &[adafilter_core::Var]| g.sum(v[0]);
    let report = finite_diff_check(f, &[random(&mut rng, &[2, 3, 4])], FdOptions::default()).unwrap();
    assert!(report.params[0].analytic.iter().all(|&a| a == 1.0));
    assert!(report.max_rel_error() < 1e-9);
}

#[test]
fn conv_bn_composite_seed_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, &[2, 3, 5, 5]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    let gamma = Tensor::new(&[4], (0..4).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
    let beta = random(&mut rng, &[4]);
    let r = random(&mut rng, &[2, 4, 5, 5]);
    let f = move |g: &mut Graph, v: &[adafilter_core::Var]| {
        let y = g.conv2d(v[0], v[1], 1, 1)?;
        let y = g.batch_norm(y, v[2], v[3], 1e-5, None)?;
        let r = g.constant(r.shape(), r.data().to_vec())?;
        let p = g.mul(y, r)?;
        g.sum(p)
    };
    let report = finite_diff_check(f, &[x, w, gamma, beta], FdOptions::default()).unwrap();
    assert!(report.passed(), "max relative error {}", report.max_rel_error());
}

#[test]
fn whole_suite_is_fast() {
    let start = std::time::Instant::now();
    let all = suite::run_all(TRIALS, 1).unwrap();
    assert!(all.iter().all(|s| s.passed()));
    assert!(start.elapsed().as_secs() < 300);
}
