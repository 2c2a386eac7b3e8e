mod common;

use munet_core::metrics::*;
use munet_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mask(h: usize, w: usize, fg: &[usize]) -> SegmentationMask {
    let mut labels = vec![0; h * w];
    for &i in fg {
        labels[i] = 1;
    }
    SegmentationMask::new(vec![h, w], vec![1.0, 1.0], labels, SegmentationMask::numbered_classes(2)).unwrap()
}

fn v(x: MetricValue) -> f64 {
    x.value().expect("defined metric")
}

#[test]
fn overlap_examples() {
    let a = mask(4, 4, &[0, 1, 2, 3]);
    assert_eq!(dsc(&a, &a, 1).unwrap(), 100.0);
    assert_eq!(voe(&a, &a, 1).unwrap(), 0.0);
    assert_eq!(v(rvd(&a, &a, 1).unwrap()), 0.0);
    let far = mask(4, 4, &[12, 13]);
    assert_eq!(dsc(&a, &far, 1).unwrap(), 0.0);
    assert_eq!(voe(&a, &far, 1).unwrap(), 100.0);
    let half = mask(4, 4, &[2, 3, 4, 5]);
    assert_eq!(dsc(&a, &half, 1).unwrap(), 50.0);
    assert!((voe(&a, &half, 1).unwrap() - 66.67).abs() < 0.005);
    assert_eq!(v(rvd(&a, &mask(4, 4, &[0, 1]), 1).unwrap()), -50.0);
    assert_eq!(rvd(&mask(4, 4, &[]), &a, 1).unwrap(), MetricValue::Undefined);
    let empty = mask(4, 4, &[]);
    assert_eq!(dsc(&empty, &empty, 1).unwrap(), 100.0);
    assert_eq!(voe(&empty, &empty, 1).unwrap(), 0.0);
}

#[test]
fn misaligned_masks_are_rejected() {
    let a = mask(4, 4, &[0]);
    assert!(matches!(dsc(&a, &mask(4, 5, &[0]), 1), Err(Error::Shape(_))));
    let b = mask(4, 4, &[0]).with_spacing(vec![2.0, 1.0]).unwrap();
    assert!(dsc(&a, &b, 1).is_err());
    assert!(assd(&a, &b, 1).is_err());
}

#[test]
fn mask_validation() {
    let classes = SegmentationMask::numbered_classes(2);
    assert!(SegmentationMask::new(vec![2, 2], vec![1.0, 0.0], vec![0; 4], classes.clone()).is_err());
    assert!(SegmentationMask::new(vec![2, 2], vec![1.0, 1.0], vec![0, 0, 0, 5], classes.clone()).is_err());
    assert!(SegmentationMask::new(vec![2, 2], vec![1.0, 1.0], vec![0; 3], classes).is_err());
}

#[test]
fn surface_examples() {
    let single = mask(5, 5, &[12]);
    let s = extract_surface(&single, 1);
    assert_eq!(s.indices, [12]);
    assert_eq!(s.points, [[0.0, 2.0, 2.0]]);

    let square: Vec<usize> = (1..5).flat_map(|y| (1..5).map(move |x| y * 6 + x)).collect();
    let m = mask(6, 6, &square);
    let s = extract_surface(&m, 1);
    assert_eq!(s.len(), 12);
    for interior in [2 * 6 + 2, 2 * 6 + 3, 3 * 6 + 2, 3 * 6 + 3] {
        assert!(!s.indices.contains(&interior));
    }
    let doubled = extract_surface(&m.clone().with_spacing(vec![2.0, 2.0]).unwrap(), 1);
    for (p, q) in s.points.iter().zip(&doubled.points) {
        assert_eq!([2.0 * p[1], 2.0 * p[2]], [q[1], q[2]]);
    }
    assert!(extract_surface(&mask(3, 3, &[]), 1).is_empty());
}

#[test]
fn distance_examples() {
    let a = mask(8, 8, &[9]);
    let b = mask(8, 8, &[12]);
    assert_eq!(v(assd(&a, &b, 1).unwrap()), 3.0);
    assert_eq!(v(mssd(&a, &b, 1).unwrap()), 3.0);
    assert_eq!(v(assd(&a, &a, 1).unwrap()), 0.0);
    assert_eq!(v(mssd(&a, &a, 1).unwrap()), 0.0);
    assert_eq!(assd(&a, &mask(8, 8, &[]), 1).unwrap(), MetricValue::Undefined);
}

#[test]
fn evaluate_flags_instead_of_zeroing() {
    let truth = mask(6, 6, &[7, 8, 13, 14]);
    let r = evaluate(&truth, &truth).unwrap();
    let c = r.class(1).unwrap();
    assert_eq!((v(c.dsc), v(c.voe), v(c.rvd), v(c.assd), v(c.mssd)), (100.0, 0.0, 0.0, 0.0, 0.0));

    let classes = SegmentationMask::numbered_classes(3);
    let t = SegmentationMask::new(vec![3, 3], vec![1.0, 1.0], vec![0, 1, 1, 0, 0, 0, 0, 0, 0], classes.clone()).unwrap();
    let r = evaluate(&t, &t).unwrap();
    let absent = r.class(2).unwrap();
    for k in MetricKind::ALL {
        assert_eq!(absent.get(k), MetricValue::NotApplicable, "{}", k.key());
    }
    let empty_pred = SegmentationMask::new(vec![3, 3], vec![1.0, 1.0], vec![0; 9], classes).unwrap();
    let missed = evaluate(&empty_pred, &t).unwrap();
    let c = missed.class(1).unwrap();
    assert_eq!(v(c.dsc), 0.0);
    assert_eq!(v(c.voe), 100.0);
    assert_eq!(c.assd, MetricValue::Undefined);
    assert_eq!(c.mssd, MetricValue::Undefined);
    assert!(missed.to_tsv().contains("\tassd\tundefined"));
}

#[test]
fn volume_metrics_use_slice_thickness() {
    let a = [mask(4, 4, &[5]), mask(4, 4, &[])];
    let b = [mask(4, 4, &[]), mask(4, 4, &[5])];
    let (va, vb) = (SegmentationMask::stack(&a, 2.5).unwrap(), SegmentationMask::stack(&b, 2.5).unwrap());
    assert_eq!(va.dims(), [2, 4, 4]);
    assert_eq!(v(mssd(&va, &vb, 1).unwrap()), 2.5);
    common::check_against_oracle(&vb, &va, 1, 1e-9).unwrap();
}

#[test]
fn oracle_equivalence_on_200_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let truth = common::random_mask(&mut rng, 32, None);
        let pred = common::random_partner(&mut rng, &truth);
        for class in 1..=2 {
            common::check_against_oracle(&pred, &truth, class, 1e-9).unwrap_or_else(|e| panic!("case {case}: {e}"));
        }
    }
}

#[test]
fn random_three_d_volumes_match_oracle() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(2..10), rng.gen_range(2..10));
        let depth = rng.gen_range(1..5);
        let sp = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
        let slices = |rng: &mut ChaCha8Rng| (0..depth).map(|_| common::random_mask_with(rng, h, w, sp)).collect::<Vec<_>>();
        let (a, b) = (slices(&mut rng), slices(&mut rng));
        let t = rng.gen_range(1.0..4.0);
        let (va, vb) = (SegmentationMask::stack(&a, t).unwrap(), SegmentationMask::stack(&b, t).unwrap());
        for class in 1..=2 {
            common::check_against_oracle(&vb, &va, class, 1e-9).unwrap();
        }
    }
}

#[test]
fn mssd_bounds_assd_on_100_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    while checked < 100 {
        let a = common::random_mask(&mut rng, 24, None);
        let b = common::random_partner(&mut rng, &a);
        if let (MetricValue::Value(s), MetricValue::Value(m)) = (assd(&a, &b, 1).unwrap(), mssd(&a, &b, 1).unwrap()) {
            assert!(m >= s && s >= 0.0);
            checked += 1;
        }
    }
}

#[test]
fn aggregate_matches_independent_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let reports: Vec<MetricsReport> = (0..12)
        .map(|_| {
            let t = common::random_mask_with(&mut rng, 12, 12, [1.0, 1.0]);
            let p = common::random_partner(&mut rng, &t);
            evaluate(&p, &t).unwrap()
        })
        .collect();
    let rows = aggregate(&reports);
    for row in &rows {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.class(row.class)?.get(row.metric).value()).collect();
        assert_eq!(row.defined, vals.len());
        assert_eq!(row.defined + row.flagged, reports.len());
        if vals.is_empty() {
            assert_eq!(row.mean, None);
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 { vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        assert!((row.mean.unwrap() - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        assert!((row.std.unwrap() - var.sqrt()).abs() <= 1e-9);
    }
    let text = Summary::table(&rows);
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("class\tDSC (%)\tVOE (%)\tRVD (%)\tASSD (mm)\tMSSD (mm)"));
}

#[test]
fn report_tsv_round_trip_and_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = common::random_mask(&mut rng, 20, None);
    let p = common::random_partner(&mut rng, &t);
    let r = evaluate(&p, &t).unwrap();
    assert_eq!(MetricsReport::from_tsv(&r.to_tsv()).unwrap(), r);
    let broken = r.to_tsv().replacen("\tdsc\t", "\tdice\t", 1);
    assert!(matches!(MetricsReport::from_tsv(&broken), Err(Error::Corrupt { .. })));
}

fn pair(seed: u64) -> (SegmentationMask, SegmentationMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = common::random_mask(&mut rng, 32, None);
    let b = common::random_partner(&mut rng, &a);
    (a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dsc_voe_identity(seed in any::<u64>(), class in 1u16..=2) {
        let (a, b) = pair(seed);
        let d = dsc(&a, &b, class).unwrap();
        let e = voe(&a, &b, class).unwrap();
        prop_assert!((e - 100.0 * (1.0 - d / (200.0 - d))).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>(), class in 1u16..=2) {
        let (a, b) = pair(seed);
        prop_assert_eq!(dsc(&a, &b, class).unwrap(), dsc(&b, &a, class).unwrap());
        prop_assert_eq!(voe(&a, &b, class).unwrap(), voe(&b, &a, class).unwrap());
        match (assd(&a, &b, class).unwrap(), assd(&b, &a, class).unwrap()) {
            (MetricValue::Value(x), MetricValue::Value(y)) => prop_assert!((x - y).abs() < 1e-9),
            (x, y) => prop_assert_eq!(x, y),
        }
        prop_assert_eq!(mssd(&a, &b, class).unwrap(), mssd(&b, &a, class).unwrap());
        let (na, nb) = (a.count(class) as f64, b.count(class) as f64);
        if let (MetricValue::Value(x), MetricValue::Value(y)) = (rvd(&a, &b, class).unwrap(), rvd(&b, &a, class).unwrap()) {
            prop_assert!((x * na + y * nb).abs() < 1e-9 * na.max(nb) * 100.0);
        }
    }

    #[test]
    fn spacing_covariance(seed in any::<u64>(), k in 0.25f64..8.0) {
        let (a, b) = pair(seed);
        let scale = |m: &SegmentationMask| m.clone().with_spacing(m.spacing().iter().map(|s| s * k).collect()).unwrap();
        let (sa, sb) = (scale(&a), scale(&b));
        for class in 1..=2 {
            prop_assert_eq!(dsc(&a, &b, class).unwrap(), dsc(&sa, &sb, class).unwrap());
            prop_assert_eq!(voe(&a, &b, class).unwrap(), voe(&sa, &sb, class).unwrap());
            prop_assert_eq!(rvd(&a, &b, class).unwrap(), rvd(&sa, &sb, class).unwrap());
            for f in [assd, mssd] {
                match (f(&a, &b, class).unwrap(), f(&sa, &sb, class).unwrap()) {
                    (MetricValue::Value(x), MetricValue::Value(y)) => prop_assert!((x * k - y).abs() <= 1e-12 * y.max(1.0)),
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
        }
    }

    #[test]
    fn report_ranges(seed in any::<u64>()) {
        let (a, b) = pair(seed);
        for c in evaluate(&b, &a).unwrap().classes {
            if let Some(d) = c.dsc.value() { prop_assert!((0.0..=100.0).contains(&d)); }
            if let Some(e) = c.voe.value() { prop_assert!((0.0..=100.0).contains(&e)); }
            if let Some(s) = c.assd.value() { prop_assert!(s >= 0.0); }
            if let Some(m) = c.mssd.value() { prop_assert!(m >= 0.0); }
        }
    }
}
