use munet_core::gradcheck::{grad_check, GradCheckOptions};
use munet_core::{BnMode, BnState, Padding, ParamStore, Role, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn conv(x: &Tensor, k: &Tensor, stride: usize, padding: Padding) -> Tensor {
    let mut tape = Tape::new();
    let b = Tensor::zeros(&[k.shape()[0]]);
    let (x, k, b) = (tape.input(x.clone()), tape.input(k.clone()), tape.input(b));
    let y = tape.conv2d(x, k, b, stride, padding).unwrap();
    tape.value(y).clone()
}

fn tconv(y: &Tensor, k: &Tensor, stride: usize) -> Tensor {
    let mut tape = Tape::new();
    let b = Tensor::zeros(&[k.shape()[1]]);
    let (y, k, b) = (tape.input(y.clone()), tape.input(k.clone()), tape.input(b));
    let x = tape.tconv2d(y, k, b, stride).unwrap();
    tape.value(x).clone()
}

/// Direct six-loop convolution with TensorFlow-style same padding.
fn naive_conv_same(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let (o, _, kh, kw) = k.dims4().unwrap();
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
    let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
    let (top, left) = (pad_h / 2, pad_w / 2);
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - top as isize;
                                let ix = (ox * stride + dx) as isize - left as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at4(b, ic, iy as usize, ix as usize) * k.at4(oc, ic, dy, dx);
                                }
                            }
                        }
                    }
                    let off = out.offset4(b, oc, oy, ox);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_all_ones_center_and_corners() {
    let y = conv(&Tensor::ones(&[1, 1, 3, 3]), &Tensor::ones(&[1, 1, 3, 3]), 1, Padding::Same);
    assert_eq!(y.at4(0, 0, 1, 1), 9.0);
    for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        assert_eq!(y.at4(0, 0, r, c), 4.0);
    }
}

#[test]
fn conv_delta_kernel_is_identity() {
    let x = Tensor::normal(&[2, 1, 5, 6], 1.0, &mut rng(1));
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    assert_eq!(conv(&x, &k, 1, Padding::Same), x);
}

#[test]
fn conv_valid_shape_and_errors() {
    let x = Tensor::ones(&[1, 2, 6, 5]);
    let k = Tensor::ones(&[3, 2, 3, 3]);
    let y = conv(&x, &k, 1, Padding::Valid);
    assert_eq!(y.shape(), [1, 3, 4, 3]);
    assert!(y.data().iter().all(|&v| v == 18.0));

    let mut tape = Tape::new();
    let xv = tape.input(Tensor::ones(&[1, 3, 4, 4]));
    let kv = tape.input(Tensor::ones(&[1, 2, 3, 3]));
    let bv = tape.input(Tensor::zeros(&[1]));
    assert!(tape.conv2d(xv, kv, bv, 1, Padding::Same).is_err(), "channel mismatch");
    let kv = tape.input(Tensor::ones(&[1, 3, 3, 3]));
    assert!(tape.conv2d(xv, kv, bv, 0, Padding::Same).is_err(), "zero stride");
}

#[test]
fn conv_gradient_of_sum_matches_finite_differences() {
    let mut store = ParamStore::new();
    let x = store.add("x", Role::Input, Tensor::normal(&[2, 3, 8, 8], 1.0, &mut rng(2)));
    let k = store.add("k", Role::ConvKernel, Tensor::normal(&[4, 3, 3, 3], 0.5, &mut rng(3)));
    let b = store.add("b", Role::Bias, Tensor::normal(&[4], 0.5, &mut rng(4)));
    let report = grad_check(&mut store, &GradCheckOptions::default(), |tape, s| {
        let (xv, kv, bv) = (tape.param(s, x), tape.param(s, k), tape.param(s, b));
        let y = tape.conv2d(xv, kv, bv, 1, Padding::Same)?;
        let ones = Tensor::ones(tape.value(y).shape());
        tape.weighted_sum(y, ones)
    })
    .unwrap();
    assert!(report.max_rel() < 1e-6, "max rel {}", report.max_rel());
}

#[test]
fn linear_subgraph_gradient_below_1e8() {
    // Positive data keep every gradient well away from zero, where the
    // relative error would only measure rounding.
    let mut store = ParamStore::new();
    let x = store.add("x", Role::Input, Tensor::uniform(&[1, 2, 6, 6], 0.5, 1.5, &mut rng(5)));
    let k = store.add("k", Role::ConvKernel, Tensor::uniform(&[2, 2, 3, 3], 0.5, 1.5, &mut rng(6)));
    let b = store.add("b", Role::Bias, Tensor::zeros(&[2]));
    let report = grad_check(&mut store, &GradCheckOptions::default(), |tape, s| {
        let (xv, kv, bv) = (tape.param(s, x), tape.param(s, k), tape.param(s, b));
        let y = tape.conv2d(xv, kv, bv, 1, Padding::Same)?;
        tape.weighted_sum(y, Tensor::ones(&[1, 2, 6, 6]))
    })
    .unwrap();
    assert!(report.max_rel() < 1e-8, "max rel {}", report.max_rel());
}

#[test]
fn tconv_stamps_kernel_and_doubles_extent() {
    let mut y = Tensor::zeros(&[1, 1, 4, 4]);
    let off = y.offset4(0, 0, 1, 2);
    y.data_mut()[off] = 1.0;
    let k = Tensor::from_fn(&[1, 1, 3, 3], |i| (i + 1) as f64);
    let x = tconv(&y, &k, 2);
    assert_eq!(x.shape(), [1, 1, 8, 8]);
    // The stamp is the set of outputs whose same-padded stride-2 window
    // covers input cell (1, 2): centred on (2, 4) with padding top/left 0.
    let mut stamped = 0;
    for r in 0..8 {
        for c in 0..8 {
            let v = x.at4(0, 0, r, c);
            if v != 0.0 {
                stamped += 1;
                let (dy, dx) = (r as isize - 2, c as isize - 4);
                assert!((0..3).contains(&dy) && (0..3).contains(&dx), "value at ({r}, {c})");
                assert_eq!(v, k.data()[(dy * 3 + dx) as usize]);
            }
        }
    }
    assert_eq!(stamped, 9);
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::new();
    let x = tape.input(t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let p = tape.maxpool2x2(x).unwrap();
    assert_eq!(tape.value(p).data(), [4.0]);

    let mut tape = Tape::new();
    let x = tape.input(Tensor::full(&[1, 1, 4, 4], 3.0));
    let p = tape.maxpool2x2(x).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| v == 3.0));
    let loss = tape.weighted_sum(p, Tensor::ones(&[1, 1, 2, 2])).unwrap();
    let g = tape.backward(loss).unwrap();
    let gx = g.get(x).unwrap();
    // Ties go to the first element of each window in row-major order.
    for (i, &v) in gx.data().iter().enumerate() {
        let (r, c) = (i / 4, i % 4);
        assert_eq!(v, if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 });
    }

    let mut tape = Tape::new();
    let x = tape.input(Tensor::ones(&[1, 1, 3, 4]));
    assert!(tape.maxpool2x2(x).is_err(), "odd extent");
}

#[test]
fn prelu_examples() {
    let mut tape = Tape::new();
    let x = tape.input(t4([1, 1, 1, 3], vec![2.0, -4.0, 0.0]));
    let a = tape.input(Tensor::full(&[1], 0.25));
    let y = tape.prelu(x, a).unwrap();
    assert_eq!(tape.value(y).data(), [2.0, -1.0, 0.0]);
    let a = tape.input(Tensor::full(&[1], 1.5));
    assert!(tape.prelu(x, a).is_err(), "alpha outside (0, 1)");
}

#[test]
fn batch_norm_train_and_eval() {
    let mut r = rng(8);
    let raw = Tensor::normal(&[8, 2, 5, 5], 1.0, &mut r);
    // Standardize each channel exactly, then give it mean 5 and std 2.
    let (mean, var) = munet_core::kernels::channel_moments(&raw).unwrap();
    let mut x = raw.clone();
    let plane = 25;
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % 2;
        *v = 5.0 + 2.0 * (*v - mean[c]) / var[c].sqrt();
    }
    let mut state = BnState::new(2);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let (s, b) = (tape.input(Tensor::ones(&[2])), tape.input(Tensor::zeros(&[2])));
    let y = tape.batch_norm(xv, s, b, BnMode::Train { state: &mut state, decay: 0.9 }).unwrap();
    let (m, v) = munet_core::kernels::channel_moments(tape.value(y)).unwrap();
    for c in 0..2 {
        assert!(m[c].abs() < 1e-6);
        assert!((v[c] - 1.0).abs() < 1e-4);
        assert!((state.mean[c] - 0.5).abs() < 1e-12, "0.9·0 + 0.1·5");
    }

    let fresh = BnState::new(2);
    let mut tape = Tape::new();
    let xv = tape.input(raw.clone());
    let (s, b) = (tape.input(Tensor::ones(&[2])), tape.input(Tensor::zeros(&[2])));
    let y = tape.batch_norm(xv, s, b, BnMode::Eval(&fresh)).unwrap();
    let expect = raw.map(|v| v / (1.0f64 + 1e-5).sqrt());
    assert!(tape.value(y).max_abs_diff(&expect).unwrap() < 1e-15);
    assert!(tape.value(y).max_abs_diff(&raw).unwrap() < 1e-4);
}

#[test]
fn dropout_examples() {
    let x = Tensor::full(&[1, 1, 1000, 1000], 2.0);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let same = tape.dropout(xv, 1.0, &mut rng(9)).unwrap();
    assert_eq!(tape.value(same), &x);
    let y = tape.dropout(xv, 0.8, &mut rng(9)).unwrap();
    let y = tape.value(y);
    let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / y.len() as f64;
    assert!((kept - 0.8).abs() < 0.002, "kept fraction {kept}");
    assert!((y.mean() - 2.0).abs() / 2.0 < 0.01, "mean {}", y.mean());
    assert!(tape.dropout(xv, 0.0, &mut rng(9)).is_err());
    assert!(tape.dropout(xv, 1.2, &mut rng(9)).is_err());
}

#[test]
fn concat_subtract_and_mse_examples() {
    let a = Tensor::normal(&[1, 3, 4, 4], 1.0, &mut rng(10));
    let b = Tensor::normal(&[1, 5, 4, 4], 1.0, &mut rng(11));
    let mut tape = Tape::new();
    let (av, bv) = (tape.input(a.clone()), tape.input(b.clone()));
    let c = tape.concat_channels(av, bv).unwrap();
    assert_eq!(tape.value(c).shape(), [1, 8, 4, 4]);
    assert_eq!(tape.value(c).slice_channels(0, 3).unwrap(), a);
    let loss = tape.weighted_sum(c, Tensor::ones(&[1, 8, 4, 4])).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(av).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(g.get(bv).unwrap().data().iter().all(|&v| v == 1.0));
    let z = tape.input(Tensor::zeros(&[1, 5, 4, 4]));
    let az = tape.concat_channels(av, z).unwrap();
    assert_eq!(tape.value(az).slice_channels(0, 3).unwrap(), a);
    let odd = tape.input(Tensor::zeros(&[1, 5, 4, 2]));
    assert!(tape.concat_channels(av, odd).is_err());

    let d = tape.sub(av, av).unwrap();
    assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
    let z3 = tape.input(Tensor::zeros(&[1, 3, 4, 4]));
    let d = tape.sub(av, z3).unwrap();
    assert_eq!(tape.value(d), &a);
    assert!(tape.sub(av, bv).is_err());

    let shifted = tape.input(a.map(|v| v + 1.0));
    let m = tape.mse_loss(av, av).unwrap();
    assert_eq!(tape.value(m).data(), [0.0]);
    let m = tape.mse_loss(shifted, av).unwrap();
    assert!((tape.value(m).data()[0] - 1.0).abs() < 1e-12);
}

#[test]
fn subtract_and_mse_gradients() {
    let mut store = ParamStore::new();
    // A small objective keeps the rounding of f(x ± ε) far below 1e-10.
    let a = store.add("a", Role::Input, Tensor::uniform(&[1, 1, 2, 2], 0.0, 0.5, &mut rng(12)));
    let b = store.add("b", Role::Input, Tensor::uniform(&[1, 1, 2, 2], 0.0, 0.5, &mut rng(13)));
    let w = Tensor::uniform(&[1, 1, 2, 2], 0.5, 1.0, &mut rng(14));
    let r = grad_check(&mut store, &GradCheckOptions::default(), |tape, s| {
        let (av, bv) = (tape.param(s, a), tape.param(s, b));
        let d = tape.sub(av, bv)?;
        tape.weighted_sum(d, w.clone())
    })
    .unwrap();
    assert!(r.max_rel() < 1e-10, "sub {}", r.max_rel());
    let r = grad_check(&mut store, &GradCheckOptions::default(), |tape, s| {
        let (av, bv) = (tape.param(s, a), tape.param(s, b));
        tape.mse_loss(av, bv)
    })
    .unwrap();
    assert!(r.max_rel() < 1e-8, "mse {}", r.max_rel());
}

#[test]
fn nondeterministic_subgraph_rejected() {
    let mut store = ParamStore::new();
    let a = store.add("a", Role::Input, Tensor::ones(&[1, 1, 4, 4]));
    let mut r = rng(15);
    let res = grad_check(&mut store, &GradCheckOptions::default(), |tape, s| {
        let av = tape.param(s, a);
        // A fresh dropout mask on every evaluation.
        let d = tape.dropout(av, 0.5, &mut r)?;
        tape.weighted_sum(d, Tensor::ones(&[1, 1, 4, 4]))
    });
    assert!(matches!(res, Err(munet_core::Error::NonDeterministic { .. })), "{res:?}");
}

fn shape_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    // batch, in channels, out channels, half height, half width
    (1usize..3, 1usize..4, 1usize..4, 1usize..6, 1usize..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn adjoint_identity((n, ci, co, hh, hw) in shape_strategy(), stride in 1usize..3, seed in any::<u64>()) {
        let (h, w) = (2 * hh, 2 * hw);
        let mut r = rng(seed);
        let x = Tensor::normal(&[n, ci, h, w], 1.0, &mut r);
        let k = Tensor::normal(&[co, ci, 3, 3], 1.0, &mut r);
        let y = Tensor::normal(&[n, co, h / stride, w / stride], 1.0, &mut r);
        let lhs = conv(&x, &k, stride, Padding::Same).dot(&y).unwrap();
        let rhs = x.dot(&tconv(&y, &k, stride)).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_matches_direct_loops((n, ci, co, h, w) in (1usize..3, 1usize..4, 1usize..4, 1usize..10, 1usize..10),
                                 ks in prop::sample::select(vec![1usize, 2, 3]), stride in 1usize..3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::normal(&[n, ci, h, w], 1.0, &mut r);
        let k = Tensor::normal(&[co, ci, ks, ks], 1.0, &mut r);
        let got = conv(&x, &k, stride, Padding::Same);
        let want = naive_conv_same(&x, &k, stride);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn pool_then_tconv_restores_extent((n, c, _, hh, hw) in shape_strategy(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::normal(&[n, c, 2 * hh, 2 * hw], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let p = tape.maxpool2x2(xv).unwrap();
        prop_assert_eq!(tape.value(p).shape(), &[n, c, hh, hw][..]);
        let k = tape.input(Tensor::normal(&[c, c, 3, 3], 1.0, &mut r));
        let b = tape.input(Tensor::zeros(&[c]));
        let u = tape.tconv2d(p, k, b, 2).unwrap();
        prop_assert_eq!(tape.value(u).shape(), x.shape());
    }

    #[test]
    fn prelu_identity(xs in prop::collection::vec(-1e3f64..1e3, 1..64), alpha in 0.001f64..0.999) {
        let len = xs.len();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 1, 1, len], xs.clone()).unwrap());
        let a = tape.input(Tensor::full(&[1], alpha));
        let y = tape.prelu(x, a).unwrap();
        for (v, &xi) in tape.value(y).data().iter().zip(&xs) {
            let lhs = v - alpha * xi;
            let rhs = (1.0 - alpha) * xi.max(0.0);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * xi.abs().max(1.0));
        }
    }

    #[test]
    fn primitives_are_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut r = rng(seed);
            let x = Tensor::normal(&[2, 2, 6, 6], 1.0, &mut r);
            let k = Tensor::normal(&[3, 2, 3, 3], 1.0, &mut r);
            let mut tape = Tape::new();
            let (xv, kv, bv) = (tape.input(x), tape.input(k), tape.input(Tensor::zeros(&[3])));
            let y = tape.conv2d(xv, kv, bv, 1, Padding::Same).unwrap();
            let d = tape.dropout(y, 0.8, &mut r).unwrap();
            let p = tape.maxpool2x2(d).unwrap();
            tape.value(p).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn finite_in_finite_out(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::normal(&[1, 2, 4, 4], 100.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let kv = tape.input(Tensor::normal(&[2, 2, 3, 3], 10.0, &mut r));
        let bv = tape.input(Tensor::zeros(&[2]));
        let y = tape.conv2d(xv, kv, bv, 1, Padding::Same).unwrap();
        let mut st = BnState::new(2);
        let (s, sh) = (tape.input(Tensor::ones(&[2])), tape.input(Tensor::zeros(&[2])));
        let z = tape.batch_norm(y, s, sh, BnMode::Train { state: &mut st, decay: 0.9 }).unwrap();
        prop_assert!(tape.value(z).all_finite());
    }
}
