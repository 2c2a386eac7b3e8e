//! Overlap and surface-distance metrics between label masks.
//!
//! `A` is always the reference (ground truth) and `B` the prediction, so
//! RVD is positive when the prediction is too large.

mod mask;
mod report;
mod surface;

pub use mask::{Label, SegmentationMask};
pub use report::{aggregate, ClassMetrics, MetricKind, MetricsReport, Summary};
pub use surface::{extract_surface, squared_distance_transform, Surface};

use crate::error::Result;

/// A metric outcome. Degenerate inputs are flagged instead of producing a
/// number.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetricValue {
    Value(f64),
    /// The inputs make the metric meaningless (e.g. RVD with empty
    /// reference, distances with one empty surface).
    Undefined,
    /// The class is absent from both masks.
    NotApplicable,
}

impl MetricValue {
    pub fn value(self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(v),
            _ => None,
        }
    }
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricValue::Value(v) => write!(f, "{v}"),
            MetricValue::Undefined => f.write_str("undefined"),
            MetricValue::NotApplicable => f.write_str("n/a"),
        }
    }
}

/// `(|A|, |B|, |A ∩ B|)` for one class.
pub fn overlap_counts(a: &SegmentationMask, b: &SegmentationMask, class: Label) -> Result<(usize, usize, usize)> {
    a.expect_aligned(b)?;
    let mut counts = (0, 0, 0);
    for (&la, &lb) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (la == class, lb == class);
        counts.0 += ia as usize;
        counts.1 += ib as usize;
        counts.2 += (ia && ib) as usize;
    }
    Ok(counts)
}

fn dsc_from(na: usize, nb: usize, inter: usize) -> f64 {
    if na + nb == 0 {
        100.0
    } else {
        100.0 * 2.0 * inter as f64 / (na + nb) as f64
    }
}

fn voe_from(na: usize, nb: usize, inter: usize) -> f64 {
    let union = na + nb - inter;
    if union == 0 {
        0.0
    } else {
        100.0 * (1.0 - inter as f64 / union as f64)
    }
}

/// Dice coefficient in percent; 100 when both sets are empty.
pub fn dsc(a: &SegmentationMask, b: &SegmentationMask, class: Label) -> Result<f64> {
    let (na, nb, i) = overlap_counts(a, b, class)?;
    Ok(dsc_from(na, nb, i))
}

/// Volumetric overlap error in percent; 0 when both sets are empty.
pub fn voe(a: &SegmentationMask, b: &SegmentationMask, class: Label) -> Result<f64> {
    let (na, nb, i) = overlap_counts(a, b, class)?;
    Ok(voe_from(na, nb, i))
}

/// Signed relative volume difference `(|B| − |A|) / |A|` in percent.
pub fn rvd(a: &SegmentationMask, b: &SegmentationMask, class: Label) -> Result<MetricValue> {
    let (na, nb, _) = overlap_counts(a, b, class)?;
    Ok(rvd_from(na, nb))
}

fn rvd_from(na: usize, nb: usize) -> MetricValue {
    if na == 0 {
        MetricValue::Undefined
    } else {
        MetricValue::Value(100.0 * (nb as f64 - na as f64) / na as f64)
    }
}

/// Both directed nearest-distance sets between the class surfaces, or
/// `None` when either surface is empty.
fn surface_distances(a: &SegmentationMask, b: &SegmentationMask, class: Label) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    a.expect_aligned(b)?;
    let (sa, sb) = (extract_surface(a, class), extract_surface(b, class));
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    let (dims, sp) = (a.dims3(), a.spacing3());
    Ok(Some((surface::directed_distances(&sa, &sb, dims, sp), surface::directed_distances(&sb, &sa, dims, sp))))
}

fn assd_from(ab: &[f64], ba: &[f64]) -> f64 {
    (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64
}

fn mssd_from(ab: &[f64], ba: &[f64]) -> f64 {
    ab.iter().chain(ba).copied().fold(0.0, f64::max)
}

/// Average symmetric surface distance in millimetres.
pub fn assd(a: &SegmentationMask, b: &SegmentationMask, class: Label) -> Result<MetricValue> {
    Ok(match surface_distances(a, b, class)? {
        Some((ab, ba)) => MetricValue::Value(assd_from(&ab, &ba)),
        None => MetricValue::Undefined,
    })
}

/// Maximum symmetric surface distance (surface Hausdorff) in millimetres.
pub fn mssd(a: &SegmentationMask, b: &SegmentationMask, class: Label) -> Result<MetricValue> {
    Ok(match surface_distances(a, b, class)? {
        Some((ab, ba)) => MetricValue::Value(mssd_from(&ab, &ba)),
        None => MetricValue::Undefined,
    })
}

/// All five metrics for one class.
pub fn evaluate_class(pred: &SegmentationMask, truth: &SegmentationMask, class: Label) -> Result<ClassMetrics> {
    let (na, nb, inter) = overlap_counts(truth, pred, class)?;
    let name = truth.classes().get(&class).cloned().unwrap_or_else(|| format!("class{class}"));
    if na == 0 && nb == 0 {
        let na_all = MetricValue::NotApplicable;
        return Ok(ClassMetrics { class, name, dsc: na_all, voe: na_all, rvd: na_all, assd: na_all, mssd: na_all });
    }
    let (assd, mssd) = match surface_distances(truth, pred, class)? {
        Some((ab, ba)) => (MetricValue::Value(assd_from(&ab, &ba)), MetricValue::Value(mssd_from(&ab, &ba))),
        None => (MetricValue::Undefined, MetricValue::Undefined),
    };
    Ok(ClassMetrics {
        class,
        name,
        dsc: MetricValue::Value(dsc_from(na, nb, inter)),
        voe: MetricValue::Value(voe_from(na, nb, inter)),
        rvd: rvd_from(na, nb),
        assd,
        mssd,
    })
}

/// Metrics for every class of the reference class map except label 0
/// (background).
pub fn evaluate(pred: &SegmentationMask, truth: &SegmentationMask) -> Result<MetricsReport> {
    let classes = truth.classes().keys().copied().filter(|&c| c != 0);
    let classes = classes.map(|c| evaluate_class(pred, truth, c)).collect::<Result<_>>()?;
    Ok(MetricsReport { classes })
}

/// Dice restricted to a neighbourhood of one reference object: the object's
/// bounding box grown by `margin` voxels on every side. Used for per-object
/// scores where a whole-mask Dice would be dominated by larger objects.
pub fn object_dsc(pred: &SegmentationMask, object: &[usize], class: Label, margin: usize) -> f64 {
    let [d, h, w] = pred.dims3();
    let coord = |i: usize| [i / (h * w), (i / w) % h, i % w];
    let mut lo = [usize::MAX; 3];
    let mut hi = [0; 3];
    for &i in object {
        let c = coord(i);
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let ext = [d, h, w];
    for k in 0..3 {
        lo[k] = lo[k].saturating_sub(margin);
        hi[k] = (hi[k] + margin).min(ext[k] - 1);
    }
    let labels = pred.labels();
    let mut in_window = 0usize;
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                in_window += (labels[(z * h + y) * w + x] == class) as usize;
            }
        }
    }
    let inter = object.iter().filter(|&&i| labels[i] == class).count();
    dsc_from(object.len(), in_window, inter)
}
