//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use munet_core::metrics::{Label, SegmentationMask};
use rand::Rng;

/// Counts by direct enumeration: `(|A|, |B|, |A ∩ B|, |A ∪ B|)`.
pub fn set_counts(a: &SegmentationMask, b: &SegmentationMask, class: Label) -> (usize, usize, usize, usize) {
    let (mut na, mut nb, mut i, mut u) = (0, 0, 0, 0);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (p, q) = (x == class, y == class);
        na += p as usize;
        nb += q as usize;
        i += (p && q) as usize;
        u += (p || q) as usize;
    }
    (na, nb, i, u)
}

/// Surface points in millimetres, found by probing every face neighbour.
pub fn surface_points(m: &SegmentationMask, class: Label) -> Vec<[f64; 3]> {
    let (dims, sp): (Vec<i64>, Vec<f64>) = match (m.dims(), m.spacing()) {
        ([h, w], [sh, sw]) => (vec![1, *h as i64, *w as i64], vec![1.0, *sh, *sw]),
        (d, s) => (d.iter().map(|&v| v as i64).collect(), s.to_vec()),
    };
    let flat = m.dims().len() == 2;
    let at = |z: i64, y: i64, x: i64| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= dims[0] || y >= dims[1] || x >= dims[2] {
            return false;
        }
        m.labels()[((z * dims[1] + y) * dims[2] + x) as usize] == class
    };
    let mut out = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if !at(z, y, x) {
                    continue;
                }
                let mut nbrs = vec![(0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
                if !flat {
                    nbrs.extend([(-1, 0, 0), (1, 0, 0)]);
                }
                if nbrs.iter().any(|&(dz, dy, dx)| !at(z + dz, y + dy, x + dx)) {
                    out.push([z as f64 * sp[0], y as f64 * sp[1], x as f64 * sp[2]]);
                }
            }
        }
    }
    out
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// All-pairs `(assd, mssd)`, `None` when a surface is empty.
pub fn surface_distances(a: &SegmentationMask, b: &SegmentationMask, class: Label) -> Option<(f64, f64)> {
    let (sa, sb) = (surface_points(a, class), surface_points(b, class));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let d: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).chain(sb.iter().map(|p| nearest(p, &sa))).collect();
    Some((d.iter().sum::<f64>() / d.len() as f64, d.iter().copied().fold(0.0, f64::max)))
}

/// Random 2-D label map with blobby classes 1 and 2 plus speckle; extents
/// up to `max` per axis and random anisotropic spacing.
pub fn random_mask(rng: &mut impl Rng, max: usize, spacing: Option<[f64; 2]>) -> SegmentationMask {
    let (h, w) = (rng.gen_range(1..=max), rng.gen_range(1..=max));
    let sp = spacing.unwrap_or_else(|| [rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5)]);
    random_mask_with(rng, h, w, sp)
}

pub fn random_mask_with(rng: &mut impl Rng, h: usize, w: usize, sp: [f64; 2]) -> SegmentationMask {
    let mut labels = vec![0 as Label; h * w];
    for _ in 0..rng.gen_range(0..4) {
        let class = rng.gen_range(1..=2);
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let r = rng.gen_range(0.5..(h.max(w) as f64 / 2.0).max(1.0));
        for y in 0..h {
            for x in 0..w {
                if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                    labels[y * w + x] = class;
                }
            }
        }
    }
    let speckle = rng.gen_range(0.0..0.1);
    for l in labels.iter_mut() {
        if rng.gen_bool(speckle) {
            *l = rng.gen_range(0..=2);
        }
    }
    SegmentationMask::new(vec![h, w], sp.to_vec(), labels, SegmentationMask::numbered_classes(3)).unwrap()
}

/// Same extent and spacing as `like`, independent labels.
pub fn random_partner(rng: &mut impl Rng, like: &SegmentationMask) -> SegmentationMask {
    let d = like.dims();
    random_mask_with(rng, d[0], d[1], [like.spacing()[0], like.spacing()[1]])
}

/// Compares every metric of `evaluate_class` with the brute-force values:
/// overlap metrics exactly, distances within `tol` mm.
pub fn check_against_oracle(pred: &SegmentationMask, truth: &SegmentationMask, class: Label, tol: f64) -> Result<(), String> {
    use munet_core::metrics::{evaluate_class, MetricValue as V};
    let got = evaluate_class(pred, truth, class).map_err(|e| e.to_string())?;
    let (na, nb, i, u) = set_counts(truth, pred, class);
    let fail = |what: &str, g: V, w: String| Err(format!("class {class} {what}: got {g:?}, want {w}"));
    if na == 0 && nb == 0 {
        for (k, v) in [("dsc", got.dsc), ("voe", got.voe), ("rvd", got.rvd), ("assd", got.assd), ("mssd", got.mssd)] {
            if v != V::NotApplicable {
                return fail(k, v, "n/a".into());
            }
        }
        return Ok(());
    }
    let dsc = 200.0 * i as f64 / (na + nb) as f64;
    if got.dsc != V::Value(dsc) {
        return fail("dsc", got.dsc, dsc.to_string());
    }
    let voe = 100.0 * (1.0 - i as f64 / u as f64);
    if got.voe != V::Value(voe) {
        return fail("voe", got.voe, voe.to_string());
    }
    let rvd = if na == 0 { V::Undefined } else { V::Value(100.0 * (nb as f64 - na as f64) / na as f64) };
    if got.rvd != rvd {
        return fail("rvd", got.rvd, format!("{rvd:?}"));
    }
    match (surface_distances(truth, pred, class), got.assd, got.mssd) {
        (None, V::Undefined, V::Undefined) => Ok(()),
        (Some((a, m)), V::Value(ga), V::Value(gm)) if (a - ga).abs() <= tol && (m - gm).abs() <= tol => Ok(()),
        (want, ga, gm) => Err(format!("class {class} distances: got {ga:?}/{gm:?}, want {want:?}")),
    }
}
