//! Synthetic organ/lesion slices.
//!
//! Each slice holds one organ, a smooth closed blob obtained by perturbing
//! an ellipse with a few low-order Fourier terms, and a handful of small
//! low-contrast discs (lesions) strictly inside it. Intensities are given
//! in HU-like units, blurred with a Gaussian (stronger for the thick-slice
//! variant) and corrupted by additive Gaussian noise.

use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_objects, Provenance, SlicePair};
use crate::error::{Error, Result};
use crate::metrics::{Label, SegmentationMask};
use crate::tensor::Tensor;

pub const BACKGROUND: Label = 0;
pub const ORGAN: Label = 1;
pub const LESION: Label = 2;
pub const CLASS_NAMES: [&str; 3] = ["background", "organ", "lesion"];

const MAX_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub extent: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Organ semi-axis range as a fraction of the extent.
    pub organ_radius: [f64; 2],
    pub organ_harmonics: usize,
    /// Total relative amplitude of the contour perturbation.
    pub organ_roughness: f64,
    /// Admissible fraction of the frame covered by the organ.
    pub organ_coverage: [f64; 2],
    pub lesions: [usize; 2],
    /// Lesion radius range in pixels.
    pub lesion_radius: [f64; 2],
    pub background_level: f64,
    pub organ_level: f64,
    pub lesion_level: f64,
    /// Gaussian blur sigma in pixels.
    pub blur: f64,
    pub thick_slice: bool,
    pub thick_blur: f64,
    pub noise_std: f64,
    pub spacing_mm: f64,
    /// Size rule attached to object metadata.
    pub size_threshold: usize,
    pub size_stage: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            extent: 64,
            train: 20,
            val: 4,
            test: 4,
            organ_radius: [0.22, 0.34],
            organ_harmonics: 3,
            organ_roughness: 0.15,
            organ_coverage: [0.08, 0.45],
            lesions: [1, 3],
            lesion_radius: [1.5, 6.0],
            background_level: -120.0,
            organ_level: 80.0,
            lesion_level: 30.0,
            blur: 0.7,
            thick_slice: false,
            thick_blur: 2.0,
            noise_std: 12.0,
            spacing_mm: 1.0,
            size_threshold: 65,
            size_stage: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.extent < 8 {
            return cfg(format!("extent must be at least 8, got {}", self.extent));
        }
        let [r0, r1] = self.organ_radius;
        if !(r0 > 0.0 && r0 <= r1 && r1 <= 0.5) {
            return cfg(format!("organ_radius {:?} must satisfy 0 < lo ≤ hi ≤ 0.5", self.organ_radius));
        }
        if !(0.0..1.0).contains(&self.organ_roughness) {
            return cfg(format!("organ_roughness must lie in [0, 1), got {}", self.organ_roughness));
        }
        let [c0, c1] = self.organ_coverage;
        if !(0.0 <= c0 && c0 < c1 && c1 <= 1.0) {
            return cfg(format!("organ_coverage {:?} must satisfy 0 ≤ lo < hi ≤ 1", self.organ_coverage));
        }
        if self.lesions[0] > self.lesions[1] {
            return cfg(format!("lesions range {:?} is reversed", self.lesions));
        }
        let [l0, l1] = self.lesion_radius;
        if !(l0 >= 1.0 && l0 <= l1) {
            return cfg(format!("lesion_radius {:?} must satisfy 1 ≤ lo ≤ hi", self.lesion_radius));
        }
        for (name, v) in [("blur", self.blur), ("thick_blur", self.thick_blur), ("noise_std", self.noise_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return cfg(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return cfg(format!("spacing_mm must be positive, got {}", self.spacing_mm));
        }
        if self.size_stage == 0 {
            return cfg("size_stage must be at least 1".into());
        }
        // The smallest organ radius anywhere along its contour.
        let inner = r0 * self.extent as f64 * (1.0 - self.organ_roughness);
        if self.lesions[1] > 0 && l1 + 1.0 >= inner {
            return Err(Error::Infeasible(format!(
                "lesion radius up to {l1} px does not fit inside organs as small as {inner:.1} px"
            )));
        }
        Ok(())
    }

    fn blur_sigma(&self) -> f64 {
        if self.thick_slice {
            self.thick_blur
        } else {
            self.blur
        }
    }

    pub fn class_map() -> std::collections::BTreeMap<Label, String> {
        CLASS_NAMES.iter().enumerate().map(|(i, n)| (i as Label, n.to_string())).collect()
    }
}

/// The three splits in order `train`, `val`, `test`. Each split draws from
/// its own stream of a generator seeded by `spec.seed`, so the splits do
/// not depend on each other's sizes.
pub fn generate_splits(spec: &SyntheticSpec) -> Result<Vec<(&'static str, Vec<SlicePair>)>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (stream, (name, count)) in [("train", spec.train), ("val", spec.val), ("test", spec.test)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream as u64);
        let pairs = (0..count)
            .map(|i| generate_pair(spec, &mut rng, format!("{name}-{i:03}")))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, pairs));
    }
    Ok(out)
}

/// The training split only.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SlicePair>> {
    Ok(generate_splits(spec)?.swap_remove(0).1)
}

struct Organ {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    rot: f64,
    terms: Vec<(f64, f64)>,
}

impl Organ {
    fn sample(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let e = spec.extent as f64;
        let [r0, r1] = spec.organ_radius;
        let mut radius = || if r0 == r1 { r0 * e } else { rng.gen_range(r0..r1) * e };
        let (a, b) = (radius(), radius());
        let per = spec.organ_roughness / spec.organ_harmonics.max(1) as f64;
        let terms = (0..spec.organ_harmonics)
            .map(|_| (rng.gen_range(-per..=per), rng.gen_range(0.0..TAU)))
            .collect();
        Organ {
            cy: e / 2.0 + rng.gen_range(-0.08..0.08) * e,
            cx: e / 2.0 + rng.gen_range(-0.08..0.08) * e,
            a,
            b,
            rot: rng.gen_range(0.0..TAU),
            terms,
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let rho = dy.hypot(dx);
        if rho == 0.0 {
            return true;
        }
        let t = dy.atan2(dx) - self.rot;
        let ellipse = self.a * self.b / ((self.b * t.cos()).powi(2) + (self.a * t.sin()).powi(2)).sqrt();
        let bump: f64 = self.terms.iter().enumerate().map(|(k, (amp, ph))| amp * ((k + 2) as f64 * t + ph).cos()).sum();
        rho <= ellipse * (1.0 + bump)
    }
}

fn disc(e: usize, cy: f64, cx: f64, r: f64) -> Vec<usize> {
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(e - 1));
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(e - 1));
    let mut px = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                px.push(y * e + x);
            }
        }
    }
    px
}

fn generate_pair(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, id: String) -> Result<SlicePair> {
    let e = spec.extent;
    let n = e * e;
    for _ in 0..MAX_ATTEMPTS {
        let organ = Organ::sample(spec, rng);
        let mut labels = vec![BACKGROUND; n];
        for (i, l) in labels.iter_mut().enumerate() {
            if organ.contains((i / e) as f64, (i % e) as f64) {
                *l = ORGAN;
            }
        }
        let organ_px: Vec<usize> = (0..n).filter(|&i| labels[i] == ORGAN).collect();
        let coverage = organ_px.len() as f64 / n as f64;
        if coverage < spec.organ_coverage[0] || coverage > spec.organ_coverage[1] {
            continue;
        }
        let count = rng.gen_range(spec.lesions[0]..=spec.lesions[1]);
        let mut lesions = Vec::with_capacity(count);
        let mut tries = 0;
        while lesions.len() < count && tries < MAX_ATTEMPTS {
            tries += 1;
            let [l0, l1] = spec.lesion_radius;
            let r = if l0 == l1 { l0 } else { rng.gen_range(l0..l1) };
            let c = organ_px[rng.gen_range(0..organ_px.len())];
            let (cy, cx) = ((c / e) as f64 + rng.gen_range(-0.5..0.5), (c % e) as f64 + rng.gen_range(-0.5..0.5));
            let px = disc(e, cy, cx, r);
            // Entirely inside the organ and one pixel away from other lesions.
            let fits = !px.is_empty()
                && px.iter().all(|&i| {
                    let (y, x) = (i / e, i % e);
                    labels[i] == ORGAN
                        && y > 0
                        && x > 0
                        && y + 1 < e
                        && x + 1 < e
                        && [i - 1, i + 1, i - e, i + e].iter().all(|&j| labels[j] != LESION)
                });
            if fits {
                for &i in &px {
                    labels[i] = LESION;
                }
                lesions.push(px);
            }
        }
        if lesions.len() < count {
            continue;
        }
        return finish_pair(spec, rng, id, labels);
    }
    Err(Error::Infeasible(format!(
        "no organ within coverage {:?} holding {:?} lesions after {MAX_ATTEMPTS} attempts",
        spec.organ_coverage, spec.lesions
    )))
}

fn finish_pair(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    id: String,
    labels: Vec<Label>,
) -> Result<SlicePair> {
    let e = spec.extent;
    let sp = [spec.spacing_mm; 2];
    let level = |l: Label| match l {
        ORGAN => spec.organ_level,
        LESION => spec.lesion_level,
        _ => spec.background_level,
    };
    let clean: Vec<f64> = labels.iter().map(|&l| level(l)).collect();
    let mut image = gaussian_blur(&clean, e, e, spec.blur_sigma());
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
        for v in &mut image {
            *v += noise.sample(rng);
        }
    }
    let mask = SegmentationMask::new(vec![e, e], sp.to_vec(), labels, SyntheticSpec::class_map())?;
    let objects = derive_objects(&mask, Provenance::Synthetic, spec.size_threshold, spec.size_stage)?;
    let pair = SlicePair { id, image: Tensor::new(vec![e, e], image)?, mask, provenance: Provenance::Synthetic, objects };
    pair.audit()?;
    Ok(pair)
}

/// Separable Gaussian blur with edge clamping; `sigma = 0` copies.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return img.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r).map(|d| k[(d + r) as usize] * img[y * w + clamp(x as isize + d, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r).map(|d| k[(d + r) as usize] * tmp[clamp(y as isize + d, h) * w + x]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::SizeLabel;

    #[test]
    fn lesions_inside_organs_and_spans_threshold() {
        let spec = SyntheticSpec { train: 30, ..Default::default() };
        let pairs = generate_synthetic(&spec).unwrap();
        let mut labels = std::collections::HashSet::new();
        for p in &pairs {
            for o in p.objects.iter().filter(|o| o.class == LESION) {
                labels.insert(o.size.label);
            }
        }
        assert!(labels.contains(&SizeLabel::Small) && labels.contains(&SizeLabel::Large));
    }

    #[test]
    fn oversized_lesions_are_infeasible() {
        let spec = SyntheticSpec { lesion_radius: [10.0, 20.0], ..Default::default() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Infeasible(_))));
    }

    #[test]
    fn blur_preserves_constants() {
        let out = gaussian_blur(&[3.0; 20], 4, 5, 1.3);
        assert!(out.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }
}
