//! Permeation rates through the skip-connection residual path, object size
//! classes and feature-map dumps.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Label;
use crate::network::NetworkGraph;
use crate::tensor::Tensor;

/// Normalized maps below this value count as "no feature".
pub const VISIBILITY_THRESHOLD: f64 = 0.01;
/// Rate reported when the object has no visible feature before the path.
pub const INVISIBLE_RATE: f64 = -0.5;
pub const DEFAULT_SIZE_THRESHOLD: usize = 65;
pub const DEFAULT_REFERENCE_STAGE: usize = 4;

/// Min-max normalization to `[0, 1]` over the whole tensor. A constant map
/// becomes all zeros.
pub fn normalize_feature_map(fm: &Tensor) -> Tensor {
    let (lo, hi) = fm.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Tensor::zeros(fm.shape());
    }
    fm.map(|v| (v - lo) / range)
}

/// How the below-threshold condition is quantified over object pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchRule {
    /// The sentinel fires only when every object pixel is below threshold.
    #[default]
    AllBelow,
    /// The sentinel fires when any object pixel is below threshold.
    AnyBelow,
}

impl FromStr for BranchRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-below" => Ok(BranchRule::AllBelow),
            "any-below" => Ok(BranchRule::AnyBelow),
            other => Err(Error::Config(format!("unknown branch rule `{other}` (all-below | any-below)"))),
        }
    }
}

/// Ratio of the object's feature mass after the residual path (`fm_a`) to
/// the mass before it (`fm_b`), both normalized; [`INVISIBLE_RATE`] when
/// `fm_b` shows no feature on the object.
pub fn permeation_rate(fm_a: &Tensor, fm_b: &Tensor, object: &[bool], rule: BranchRule) -> Result<f64> {
    fm_a.expect_same_shape(fm_b)?;
    if object.len() != fm_b.len() {
        return Err(Error::Shape(format!("object mask has {} pixels, maps have {}", object.len(), fm_b.len())));
    }
    if !object.iter().any(|&o| o) {
        return Err(Error::InvalidArgument("object mask is empty".into()));
    }
    let below = object.iter().zip(fm_b.data()).filter(|(&o, _)| o).map(|(_, &b)| b < VISIBILITY_THRESHOLD);
    let sentinel = match rule {
        BranchRule::AllBelow => below.clone().all(|b| b),
        BranchRule::AnyBelow => below.clone().any(|b| b),
    };
    if sentinel {
        return Ok(INVISIBLE_RATE);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for ((&o, &a), &b) in object.iter().zip(fm_a.data()).zip(fm_b.data()) {
        if o {
            num += a;
            den += b;
        }
    }
    Ok(num / den)
}

/// Block-OR down-sampling of an `h × w` binary mask by `factor`: an output
/// pixel is set when any input pixel of its block is. Partial blocks at the
/// right and bottom edges count as blocks.
pub fn downsample_or(mask: &[bool], h: usize, w: usize, factor: usize) -> (Vec<bool>, usize, usize) {
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = vec![false; oh * ow];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                out[(y / factor) * ow + x / factor] = true;
            }
        }
    }
    (out, oh, ow)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeLabel {
    Small,
    Large,
}

impl SizeLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeLabel::Small => "small",
            SizeLabel::Large => "large",
        }
    }
}

impl FromStr for SizeLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SizeLabel::Small),
            "large" => Ok(SizeLabel::Large),
            other => Err(Error::InvalidArgument(format!("unknown size class `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSizeClass {
    pub label: SizeLabel,
    /// Footprint in pixels at the reference stage.
    pub pixel_count: usize,
    pub native_pixels: usize,
    /// Native footprint in mm².
    pub area_mm2: f64,
    pub threshold: usize,
    pub stage: usize,
}

/// Size class of an object given at native (stage 1) resolution. The
/// footprint at `stage` is the number of set pixels after block-OR
/// down-sampling by `2^(stage − 1)`; the object is small when that count is
/// strictly below `threshold`.
pub fn classify_object(
    mask: &[bool],
    h: usize,
    w: usize,
    mm_per_pixel: [f64; 2],
    threshold: usize,
    stage: usize,
) -> Result<ObjectSizeClass> {
    if mask.len() != h * w {
        return Err(Error::Shape(format!("mask has {} pixels, expected {h}×{w}", mask.len())));
    }
    if stage == 0 || stage > 24 {
        return Err(Error::InvalidArgument(format!("reference stage must lie in 1..=24, got {stage}")));
    }
    let native = mask.iter().filter(|&&m| m).count();
    if native == 0 {
        return Err(Error::InvalidArgument("object mask is empty".into()));
    }
    let (down, _, _) = downsample_or(mask, h, w, 1 << (stage - 1));
    let pixel_count = down.iter().filter(|&&m| m).count();
    Ok(ObjectSizeClass {
        label: if pixel_count < threshold { SizeLabel::Small } else { SizeLabel::Large },
        pixel_count,
        native_pixels: native,
        area_mm2: native as f64 * mm_per_pixel[0] * mm_per_pixel[1],
        threshold,
        stage,
    })
}

/// One object at native resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMask {
    pub id: usize,
    pub class: Label,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct ProfileOptions {
    pub rule: BranchRule,
    /// Emit one record per channel in addition to the channel-mean record.
    pub per_channel: bool,
    pub size_threshold: usize,
    pub reference_stage: usize,
    pub mm_per_pixel: [f64; 2],
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            rule: BranchRule::AllBelow,
            per_channel: false,
            size_threshold: DEFAULT_SIZE_THRESHOLD,
            reference_stage: DEFAULT_REFERENCE_STAGE,
            mm_per_pixel: [1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermeationRecord {
    pub stage: usize,
    pub object: usize,
    pub class: Label,
    /// `None` for the channel-mean map.
    pub channel: Option<usize>,
    pub native_pixels: usize,
    pub size: SizeLabel,
    pub rate: f64,
}

fn channel_maps(t: &Tensor) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 {
        return Err(Error::Shape(format!("expected a single-image batch, got {n}")));
    }
    let plane = h * w;
    (0..c).map(|k| Tensor::new(vec![h, w], t.data()[k * plane..(k + 1) * plane].to_vec())).collect()
}

fn channel_mean(t: &Tensor) -> Result<Tensor> {
    let maps = channel_maps(t)?;
    let mut acc = Tensor::zeros(maps[0].shape());
    for m in &maps {
        for (a, v) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let c = maps.len() as f64;
    Ok(acc.map(|v| v / c))
}

/// Permeation rate of every object at every pooled stage of `net` for one
/// `C × H × W` image.
pub fn permeation_profile(
    net: &mut NetworkGraph,
    image: &Tensor,
    objects: &[ObjectMask],
    opts: &ProfileOptions,
) -> Result<Vec<PermeationRecord>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected a C×H×W image, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let x = image.clone().reshape(vec![1, shape[0], h, w])?;
    let stages = net.config().stages;
    let mut names = Vec::new();
    for s in 1..stages {
        names.push(format!("stage{s}.fm_b"));
        names.push(format!("stage{s}.fm_a"));
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let maps = net.tap_feature_maps(&x, &refs)?;
    let mut sizes = Vec::with_capacity(objects.len());
    for o in objects {
        let sc = classify_object(&o.mask, h, w, opts.mm_per_pixel, opts.size_threshold, opts.reference_stage)?;
        sizes.push(sc);
    }
    let mut out = Vec::new();
    for s in 1..stages {
        let b = &maps[&format!("stage{s}.fm_b")];
        let a = &maps[&format!("stage{s}.fm_a")];
        let (nb, na) = (normalize_feature_map(&channel_mean(b)?), normalize_feature_map(&channel_mean(a)?));
        let per_ch = if opts.per_channel {
            let (cb, ca) = (channel_maps(b)?, channel_maps(a)?);
            cb.iter().zip(&ca).map(|(b, a)| (normalize_feature_map(b), normalize_feature_map(a))).collect()
        } else {
            Vec::new()
        };
        for (o, sc) in objects.iter().zip(&sizes) {
            let (m, _, _) = downsample_or(&o.mask, h, w, 1 << (s - 1));
            let record = |channel, rate| PermeationRecord {
                stage: s,
                object: o.id,
                class: o.class,
                channel,
                native_pixels: sc.native_pixels,
                size: sc.label,
                rate,
            };
            out.push(record(None, permeation_rate(&na, &nb, &m, opts.rule)?));
            for (c, (b, a)) in per_ch.iter().enumerate() {
                out.push(record(Some(c), permeation_rate(a, b, &m, opts.rule)?));
            }
        }
    }
    Ok(out)
}

pub const PROFILE_HEADER: &str = "stage\tobject\tclass\tchannel\tnative_pixels\tsize\trate";

pub fn profile_to_tsv(records: &[PermeationRecord]) -> String {
    let mut out = format!("{PROFILE_HEADER}\n");
    for r in records {
        let ch = r.channel.map_or_else(|| "mean".to_string(), |c| c.to_string());
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{ch}\t{}\t{}\t{}",
            r.stage,
            r.object,
            r.class,
            r.native_pixels,
            r.size.as_str(),
            r.rate
        );
    }
    out
}

pub fn profile_from_tsv(text: &str) -> Result<Vec<PermeationRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(PROFILE_HEADER) {
        return Err(Error::corrupt("profile header line missing", Some(0)));
    }
    let mut offset = PROFILE_HEADER.len() as u64 + 1;
    let mut out = Vec::new();
    for line in lines {
        let bad = || Error::corrupt(format!("profile line `{line}`"), Some(offset));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        out.push(PermeationRecord {
            stage: f[0].parse().map_err(|_| bad())?,
            object: f[1].parse().map_err(|_| bad())?,
            class: f[2].parse().map_err(|_| bad())?,
            channel: if f[3] == "mean" { None } else { Some(f[3].parse().map_err(|_| bad())?) },
            native_pixels: f[4].parse().map_err(|_| bad())?,
            size: f[5].parse().map_err(|_| bad())?,
            rate: f[6].parse().map_err(|_| bad())?,
        });
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

/// Write an `h × w` map with values in `[0, 1]` as an 8-bit binary PGM.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("PGM export needs a 2-D map, got {s:?}"))),
    };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Normalized channel-mean maps of the named taps, ready for [`write_pgm`].
pub fn normalized_tap_maps(net: &mut NetworkGraph, image: &Tensor, names: &[&str]) -> Result<Vec<(String, Tensor)>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected a C×H×W image, got {s:?}")));
    }
    let x = image.clone().reshape(vec![1, s[0], s[1], s[2]])?;
    let maps = net.tap_feature_maps(&x, names)?;
    maps.into_iter().map(|(n, t)| Ok((n, normalize_feature_map(&channel_mean(&t)?)))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_max() {
        let t = Tensor::new(vec![3], vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(normalize_feature_map(&t).data(), &[0.0, 0.5, 1.0]);
        assert_eq!(normalize_feature_map(&Tensor::full(&[4], 3.0)).data(), &[0.0; 4]);
    }

    #[test]
    fn branches() {
        let b = Tensor::new(vec![4], vec![0.2, 0.4, 0.005, 0.0]).unwrap();
        let obj = [true, true, false, false];
        assert_eq!(permeation_rate(&b, &b, &obj, BranchRule::AllBelow).unwrap(), 1.0);
        let half = b.map(|v| 0.5 * v);
        assert_eq!(permeation_rate(&half, &b, &obj, BranchRule::AllBelow).unwrap(), 0.5);
        let dark = [false, false, true, true];
        assert_eq!(permeation_rate(&b, &b, &dark, BranchRule::AllBelow).unwrap(), INVISIBLE_RATE);
        let mixed = [true, false, true, false];
        assert_eq!(permeation_rate(&b, &b, &mixed, BranchRule::AllBelow).unwrap(), 1.0);
        assert_eq!(permeation_rate(&b, &b, &mixed, BranchRule::AnyBelow).unwrap(), INVISIBLE_RATE);
        assert!(permeation_rate(&b, &b, &[false; 4], BranchRule::AllBelow).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        // 64 and 65 surviving pixels at stage 4 (8×8 blocks) on a 128-wide
        // frame: one pixel per block.
        let (h, w) = (128, 128);
        let mut mask = vec![false; h * w];
        for k in 0..65 {
            let (by, bx) = (k / 16, k % 16);
            mask[(by * 8) * w + bx * 8] = true;
        }
        let c = classify_object(&mask, h, w, [1.0, 1.0], 65, 4).unwrap();
        assert_eq!((c.pixel_count, c.label), (65, SizeLabel::Large));
        mask[(4 * 8) * w] = false;
        let c = classify_object(&mask, h, w, [1.0, 1.0], 65, 4).unwrap();
        assert_eq!((c.pixel_count, c.label), (64, SizeLabel::Small));
    }
}
