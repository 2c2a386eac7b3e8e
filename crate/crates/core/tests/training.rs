use munet_core::data::synthetic::generate_synthetic;
use munet_core::data::SyntheticSpec;
use munet_core::network::{NetworkConfig, NetworkGraph, Variant, WidthMultiplier};
use munet_core::training::*;
use munet_core::{Error, ParamStore, Role, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg(extent: usize) -> NetworkConfig {
    NetworkConfig {
        stages: 3,
        base_features: 4,
        in_channels: 1,
        out_classes: 3,
        input_extent: extent,
        variant: Variant::Munet,
        width_multiplier: WidthMultiplier::ONE,
    }
}

fn dataset(extent: usize, n: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec { extent, train: n, lesion_radius: if extent < 32 { [1.0, 1.4] } else { [1.5, 3.0] }, seed, ..SyntheticSpec::default() };
    let pairs = generate_synthetic(&spec).unwrap();
    Dataset { samples: pairs.iter().map(|p| p.to_sample(3).unwrap()).collect() }
}

fn fresh(cfg: NetworkConfig, seed: u64) -> NetworkGraph {
    let mut net = NetworkGraph::build(cfg).unwrap();
    init_params(&mut net, seed);
    net
}

fn losses(log: &[EpochRecord]) -> Vec<f64> {
    log.iter().map(|r| r.loss).collect()
}

#[test]
fn initialization_statistics() {
    let net = fresh(NetworkConfig::desk(), 7);
    let mut kernels = 0;
    for p in net.params().iter() {
        let d = p.value.data();
        match p.role {
            Role::ConvKernel => {
                kernels += d.len();
                assert!(d.iter().all(|v| v.abs() <= 0.1), "{}", p.name);
            }
            Role::Bias => assert!(d.iter().all(|&v| v == 0.1), "{}", p.name),
            Role::PreluAlpha => assert!(d.iter().all(|&v| v == 0.25)),
            Role::BnScale => assert!(d.iter().all(|&v| v == 1.0)),
            Role::BnShift => assert!(d.iter().all(|&v| v == 0.0)),
            Role::Input => {}
        }
    }
    // A ±2σ truncated normal has standard deviation ≈ 0.88σ.
    let all: Vec<f64> = net.params().iter().filter(|p| p.role == Role::ConvKernel).flat_map(|p| p.value.data().to_vec()).collect();
    let mean = all.iter().sum::<f64>() / kernels as f64;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / kernels as f64).sqrt();
    assert!(mean.abs() < 0.002, "mean {mean}");
    assert!((std - 0.05 * 0.8796).abs() < 0.002, "std {std}");

    let again = fresh(NetworkConfig::desk(), 7);
    for (a, b) in net.params().iter().zip(again.params().iter()) {
        assert_eq!(a.value, b.value);
    }
}

fn scalar_store(value: f64, grad: f64, role: Role) -> ParamStore {
    let mut s = ParamStore::new();
    let id = s.add("w", role, Tensor::full(&[1], value));
    s.get_mut(id).grad = Tensor::full(&[1], grad);
    s
}

#[test]
fn adam_single_step_matches_hand_trace() {
    let mut s = scalar_store(0.0, 1.0, Role::Bias);
    let mut opt = OptimizerState::with_defaults(&s);
    adam_step(&mut s, &mut opt, 0.1, 0.0).unwrap();
    // m̂ = 1, v̂ = 1 after bias correction.
    let want = -0.1 * (1.0 / (1.0 + 1e-8));
    assert!((s.iter().next().unwrap().value.data()[0] - want).abs() < 1e-15);
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut s = scalar_store(0.7, 0.0, Role::ConvKernel);
    let mut opt = OptimizerState::with_defaults(&s);
    adam_step(&mut s, &mut opt, 0.1, 0.0).unwrap();
    assert_eq!(s.iter().next().unwrap().value.data()[0], 0.7);
}

#[test]
fn weight_decay_shrinks_with_zero_data_gradient() {
    for v in [0.5, -0.5] {
        let mut s = scalar_store(v, 0.0, Role::ConvKernel);
        let mut opt = OptimizerState::with_defaults(&s);
        adam_step(&mut s, &mut opt, 1e-3, 0.003).unwrap();
        let after = s.iter().next().unwrap().value.data()[0];
        assert!(after.abs() < v.abs() && after.signum() == v.signum(), "{v} → {after}");
    }
}

#[test]
fn nan_gradient_aborts_the_step() {
    let mut s = scalar_store(0.5, f64::NAN, Role::ConvKernel);
    let mut opt = OptimizerState::with_defaults(&s);
    assert!(matches!(adam_step(&mut s, &mut opt, 1e-3, 0.0), Err(Error::NonFinite(_))));
    assert_eq!(s.iter().next().unwrap().value.data()[0], 0.5);
    assert_eq!(opt.step, 0);
}

#[test]
fn adam_is_deterministic_over_100_steps() {
    let run = || {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let id = s.add("w", Role::ConvKernel, Tensor::normal(&[4, 4], 1.0, &mut r));
        let mut opt = OptimizerState::with_defaults(&s);
        for _ in 0..100 {
            s.get_mut(id).grad = Tensor::normal(&[4, 4], 1.0, &mut r);
            adam_step(&mut s, &mut opt, 1e-2, 0.003).unwrap();
        }
        s.value(id).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn prelu_slopes_stay_clamped() {
    let mut s = scalar_store(0.998, -1.0, Role::PreluAlpha);
    let mut opt = OptimizerState::with_defaults(&s);
    adam_step(&mut s, &mut opt, 0.5, 0.0).unwrap();
    assert_eq!(s.iter().next().unwrap().value.data()[0], 0.999);
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at_epoch(&cfg, 0), 1e-4);
    assert!((lr_at_epoch(&cfg, 5000) - 9e-5).abs() < 1e-18);
    assert!((lr_at_epoch(&cfg, 12_500) - 8.1e-5).abs() < 1e-18);
}

proptest! {
    #[test]
    fn schedule_is_piecewise_constant(epoch in 0u64..100_000, interval in 1u64..10_000) {
        let cfg = TrainConfig { lr_interval: interval, ..TrainConfig::default() };
        let k = epoch / interval;
        let start = k * interval;
        prop_assert_eq!(lr_at_epoch(&cfg, epoch), lr_at_epoch(&cfg, start));
        let next = lr_at_epoch(&cfg, start + interval);
        prop_assert!((next - 0.9 * lr_at_epoch(&cfg, start)).abs() <= 1e-15 * next);
    }
}

#[test]
fn same_seed_same_loss_curve() {
    let data = dataset(16, 4, 1);
    let cfg = TrainConfig { max_epochs: 8, ..TrainConfig::default() };
    let a = train(fresh(small_cfg(16), 2), &data, &cfg).unwrap();
    let b = train(fresh(small_cfg(16), 2), &data, &cfg).unwrap();
    let (la, lb) = (losses(&a.log), losses(&b.log));
    assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}

#[test]
fn single_sample_memorization() {
    // Dropout noise alone keeps the training loss near 1e-2 at keep 0.8,
    // so memorization is measured with dropout off.
    let data = dataset(32, 1, 100);
    let cfg = TrainConfig { lr0: 1e-3, dropout_keep: 1.0, max_epochs: 2000, ..TrainConfig::default() };
    let out = train(fresh(small_cfg(32), 0), &data, &cfg).unwrap();
    let last = out.log.last().unwrap().loss;
    assert!(last < 1e-3, "final loss {last}");
}

#[test]
fn loss_trend_over_first_fifty_epochs() {
    let spec = SyntheticSpec { train: 4, seed: 100, ..SyntheticSpec::default() };
    let pairs = generate_synthetic(&spec).unwrap();
    let data = Dataset { samples: pairs.iter().map(|p| p.to_sample(3).unwrap()).collect() };
    let (mut monotone, mut steps, mut down) = (0, 0, 0);
    for seed in 0..10 {
        let cfg = TrainConfig { seed, max_epochs: 50, ..TrainConfig::default() };
        let l = losses(&train(fresh(NetworkConfig::desk(), seed), &data, &cfg).unwrap().log);
        let ups = l.windows(2).filter(|w| w[1] > w[0]).count();
        monotone += usize::from(ups == 0);
        steps += l.len() - 1;
        down += l.len() - 1 - ups;
        assert!(l[49] < l[0], "seed {seed}: {} → {}", l[0], l[49]);
    }
    let frac = down as f64 / steps as f64;
    println!("strictly non-increasing runs: {monotone}/10; non-increasing epoch steps: {down}/{steps}");
    assert!(frac >= 0.9, "non-increasing fraction {frac}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(16, 4, 3);
    let cfg = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
    let out = train(fresh(small_cfg(16), 4), &data, &cfg).unwrap();
    let path = dir.path().join("a.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let mut restored = loaded.network().unwrap();
    let mut original = out.network;
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..3 {
        let x = Tensor::uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut r);
        let (a, b) = (original.predict(&x).unwrap(), restored.predict(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn corrupt_and_foreign_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let net = fresh(small_cfg(16), 6);
    let bytes = Checkpoint::weights_only(&net).to_bytes();

    let truncated = dir.path().join("t.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(Checkpoint::load(&truncated), Err(Error::Corrupt { .. })));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt { .. })));

    let mut versioned = bytes.clone();
    versioned[8..12].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&versioned), Err(Error::Version { found: 99, .. })));

    let unet = fresh(NetworkConfig { variant: Variant::Unet, ..small_cfg(16) }, 6);
    let mut munet = fresh(small_cfg(16), 6);
    let err = Checkpoint::weights_only(&unet).restore_into(&mut munet).unwrap_err();
    assert!(matches!(err, Error::Topology { .. }));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = dataset(16, 4, 8);
    let cfg = TrainConfig { max_epochs: 6, checkpoint_every: 3, ..TrainConfig::default() };
    let mut straight = Trainer::new(fresh(small_cfg(16), 9), cfg.clone()).unwrap();
    let full = train_with(&mut straight, &data, |_, _| Ok(()), |_| Ok(())).unwrap();

    let mut first = Trainer::new(fresh(small_cfg(16), 9), cfg).unwrap();
    first.set_max_epochs(3);
    let mut saved = None;
    let head = train_with(&mut first, &data, |_, _| Ok(()), |c| {
        saved = Some(c.to_bytes());
        Ok(())
    })
    .unwrap();
    let ckpt = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
    let mut resumed = Trainer::resume(NetworkGraph::build(small_cfg(16)).unwrap(), &ckpt).unwrap();
    resumed.set_max_epochs(6);
    let tail = train_with(&mut resumed, &data, |_, _| Ok(()), |_| Ok(())).unwrap();

    let joined: Vec<u64> = head.iter().chain(&tail).map(|r| r.loss.to_bits()).collect();
    assert_eq!(joined, full.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>());
    assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
}

#[test]
fn shape_mismatch_fails_before_training() {
    let data = dataset(16, 2, 10);
    let cfg = TrainConfig { max_epochs: 3, ..TrainConfig::default() };
    let failure = train(fresh(small_cfg(32), 11), &data, &cfg).err().unwrap();
    assert!(matches!(failure.error, Error::Shape(_)));
    assert_eq!(failure.last_good.unwrap().epoch, 0);
}

#[test]
fn non_finite_loss_aborts_with_last_good_checkpoint() {
    let mut data = dataset(16, 2, 12);
    let mut reached_epoch_hook = false;
    data.samples[0].image.data_mut()[0] = f64::NAN;
    let mut trainer = Trainer::new(fresh(small_cfg(16), 13), TrainConfig { max_epochs: 4, ..TrainConfig::default() }).unwrap();
    let failure = train_with(&mut trainer, &data, |_, _| {
        reached_epoch_hook = true;
        Ok(())
    }, |_| Ok(()))
    .err()
    .unwrap();
    assert!(matches!(failure.error, Error::NonFinite(_)), "{:?}", failure.error);
    assert!(!reached_epoch_hook, "the first epoch already fails");
    let good = failure.last_good.unwrap();
    assert_eq!(good.epoch, 0);
    assert!(good.params.iter().all(|p| p.data.iter().all(|v| v.is_finite())));
}

#[test]
fn batch_norm_recalibration_is_deterministic_and_parameter_free() {
    let data = dataset(16, 4, 14);
    let net = fresh(small_cfg(16), 15);
    let (mut a, mut b) = (net.clone(), net.clone());
    recalibrate_batch_norm(&mut a, &data, 4).unwrap();
    recalibrate_batch_norm(&mut b, &data, 4).unwrap();
    assert_eq!(a.bn_states(), b.bn_states());
    assert_ne!(a.bn_states(), net.bn_states());
    for (p, q) in a.params().iter().zip(net.params().iter()) {
        assert_eq!(p.value, q.value);
    }
}
