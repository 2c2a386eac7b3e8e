//! Slices, intensity scaling, target encoding and on-disk datasets.
//!
//! A dataset directory holds one sub-directory per split with raw payloads
//! and headers (see [`raw`]) plus a `manifest.jsonl` index with one JSON
//! object per slice pair.

pub mod raw;
pub mod synthetic;

use std::collections::{BTreeMap, VecDeque};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use raw::{read_mask, read_raw, write_mask, write_raw, Dtype, RawHeader};
pub use synthetic::{generate_splits, generate_synthetic, SyntheticSpec};

use crate::analysis::{classify_object, ObjectMask, ObjectSizeClass, DEFAULT_REFERENCE_STAGE, DEFAULT_SIZE_THRESHOLD};
use crate::error::{Error, Result};
use crate::metrics::{Label, SegmentationMask};
use crate::tensor::Tensor;
use crate::training::Sample;

pub const HU_LOW: f64 = -250.0;
pub const HU_HIGH: f64 = 250.0;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub id: usize,
    pub class: Label,
    pub pixels: usize,
    pub size: ObjectSizeClass,
}

/// A 2-D intensity image with its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePair {
    pub id: String,
    /// `H × W` intensities, unscaled.
    pub image: Tensor,
    pub mask: SegmentationMask,
    pub provenance: Provenance,
    pub objects: Vec<ObjectMeta>,
}

impl SlicePair {
    pub fn extent(&self) -> (usize, usize) {
        (self.mask.dims()[0], self.mask.dims()[1])
    }

    pub fn class_counts(&self) -> BTreeMap<Label, usize> {
        self.mask.classes().keys().map(|&c| (c, self.mask.count(c))).collect()
    }

    /// Pixel-set masks of the recorded objects, in metadata order.
    pub fn object_masks(&self) -> Vec<ObjectMask> {
        let n = self.mask.len();
        object_pixel_sets(&self.mask, self.provenance)
            .into_iter()
            .zip(&self.objects)
            .map(|((class, px), o)| {
                let mut m = vec![false; n];
                for i in px {
                    m[i] = true;
                }
                ObjectMask { id: o.id, class, mask: m }
            })
            .collect()
    }

    /// Check that the recorded object metadata matches the label grid.
    pub fn audit(&self) -> Result<()> {
        let (h, w) = self.extent();
        if self.image.shape() != [h, w] {
            return Err(Error::Shape(format!("{}: image {:?} vs mask {h}×{w}", self.id, self.image.shape())));
        }
        let sets = object_pixel_sets(&self.mask, self.provenance);
        if sets.len() != self.objects.len() {
            return Err(Error::corrupt(
                format!("{}: {} objects recorded, mask has {}", self.id, self.objects.len(), sets.len()),
                None,
            ));
        }
        for (o, (class, px)) in self.objects.iter().zip(&sets) {
            if o.class != *class || o.pixels != px.len() {
                return Err(Error::corrupt(
                    format!("{}: object {} records class {} with {} pixels, mask has class {class} with {}", self.id, o.id, o.class, o.pixels, px.len()),
                    None,
                ));
            }
        }
        if self.provenance == Provenance::Synthetic {
            let lesion: usize = self.objects.iter().filter(|o| o.class == synthetic::LESION).map(|o| o.pixels).sum();
            let organ: usize = self.objects.iter().filter(|o| o.class == synthetic::ORGAN).map(|o| o.pixels).sum();
            let counts = self.class_counts();
            if counts.get(&synthetic::LESION) != Some(&lesion) || counts.get(&synthetic::ORGAN) != Some(&(organ - lesion)) {
                return Err(Error::corrupt(format!("{}: class counts {counts:?} disagree with objects", self.id), None));
            }
        }
        Ok(())
    }

    /// Training sample: scaled `1 × H × W` image and one-hot target.
    pub fn to_sample(&self, classes: usize) -> Result<Sample> {
        let (h, w) = self.extent();
        let image = scale_intensity(&self.image, HU_LOW, HU_HIGH)?.reshape(vec![1, h, w])?;
        Ok(Sample { image, target: one_hot(&self.mask, classes)? })
    }
}

/// Clamp to `[low, high]` and map affinely onto `[0, 1]`.
pub fn scale_intensity(image: &Tensor, low: f64, high: f64) -> Result<Tensor> {
    if !(low < high) {
        return Err(Error::InvalidArgument(format!("intensity window [{low}, {high}] is empty")));
    }
    if !image.all_finite() {
        return Err(Error::NonFinite("image intensities".into()));
    }
    Ok(image.map(|v| (v.clamp(low, high) - low) / (high - low)))
}

/// `classes × H × W` indicator channels of a 2-D mask.
pub fn one_hot(mask: &SegmentationMask, classes: usize) -> Result<Tensor> {
    let [h, w] = mask.dims()[..] else {
        return Err(Error::Shape(format!("one-hot encoding needs a 2-D mask, got {:?}", mask.dims())));
    };
    let plane = h * w;
    let mut data = vec![0.0; classes * plane];
    for (i, &l) in mask.labels().iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{classes}")));
        }
        data[l as usize * plane + i] = 1.0;
    }
    Tensor::new(vec![classes, h, w], data)
}

/// Per-pixel index of the largest channel of a `K × H × W` or
/// `1 × K × H × W` score map; ties go to the lower class index.
pub fn argmax(scores: &Tensor) -> Result<Vec<Label>> {
    let (k, plane) = match scores.shape() {
        [k, h, w] | [1, k, h, w] => (*k, h * w),
        s => return Err(Error::Shape(format!("expected K×H×W scores, got {s:?}"))),
    };
    let d = scores.data();
    Ok((0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + i] > d[best * plane + i] {
                    best = c;
                }
            }
            best as Label
        })
        .collect())
}

/// Hard prediction mask from scores, sharing `like`'s spacing and classes.
pub fn prediction_mask(scores: &Tensor, like: &SegmentationMask) -> Result<SegmentationMask> {
    let labels = argmax(scores)?;
    SegmentationMask::new(like.dims().to_vec(), like.spacing().to_vec(), labels, like.classes().clone())
}

/// Four-connected components in scan order of their first pixel.
pub fn connected_components(fg: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; fg.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Objects of a slice as `(class, pixel indices)`: the four-connected
/// components of every non-background class, classes ascending and
/// components in scan order. For synthetic slices the organ object covers
/// the lesions it contains.
pub fn object_pixel_sets(mask: &SegmentationMask, provenance: Provenance) -> Vec<(Label, Vec<usize>)> {
    let (h, w) = (mask.dims()[0], mask.dims()[1]);
    let mut out = Vec::new();
    for &class in mask.classes().keys().filter(|&&c| c != 0) {
        let fg: Vec<bool> = mask
            .labels()
            .iter()
            .map(|&l| l == class || (provenance == Provenance::Synthetic && class == synthetic::ORGAN && l == synthetic::LESION))
            .collect();
        out.extend(connected_components(&fg, h, w).into_iter().map(|c| (class, c)));
    }
    out
}

/// Object metadata under the given size rule.
pub fn derive_objects(mask: &SegmentationMask, provenance: Provenance, threshold: usize, stage: usize) -> Result<Vec<ObjectMeta>> {
    let (h, w) = (mask.dims()[0], mask.dims()[1]);
    let sp = [mask.spacing()[0], mask.spacing()[1]];
    object_pixel_sets(mask, provenance)
        .into_iter()
        .enumerate()
        .map(|(id, (class, px))| {
            let mut m = vec![false; h * w];
            for &i in &px {
                m[i] = true;
            }
            let size = classify_object(&m, h, w, sp, threshold, stage)?;
            Ok(ObjectMeta { id, class, pixels: px.len(), size })
        })
        .collect()
}

/// Slices of an image/label pair stored as raw grids. Volumes
/// (`D × H × W`) are split along their first axis. Intensities are
/// returned as stored.
pub fn load_slices(image: &Path, labels: &Path) -> Result<Vec<SlicePair>> {
    let (ih, values) = read_raw(image)?;
    let mask = read_mask(labels)?;
    if ih.dims != mask.dims() {
        return Err(Error::Shape(format!("image {:?} and labels {:?} differ", ih.dims, mask.dims())));
    }
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let (slices, h, w, sp) = match ih.dims[..] {
        [h, w] => (1, h, w, mask.spacing().to_vec()),
        [d, h, w] => (d, h, w, mask.spacing()[1..].to_vec()),
        _ => return Err(Error::Shape(format!("expected 2-D or 3-D grids, got {:?}", ih.dims))),
    };
    let plane = h * w;
    (0..slices)
        .map(|z| {
            let labels = mask.labels()[z * plane..(z + 1) * plane].to_vec();
            let m = SegmentationMask::new(vec![h, w], sp.clone(), labels, mask.classes().clone())?;
            let objects = derive_objects(&m, Provenance::External, DEFAULT_SIZE_THRESHOLD, DEFAULT_REFERENCE_STAGE)?;
            Ok(SlicePair {
                id: if slices == 1 { stem.clone() } else { format!("{stem}-{z:03}") },
                image: Tensor::new(vec![h, w], values[z * plane..(z + 1) * plane].to_vec())?,
                mask: m,
                provenance: Provenance::External,
                objects,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub image: String,
    pub mask: String,
    pub provenance: Provenance,
    pub class_counts: BTreeMap<Label, usize>,
    pub objects: Vec<ObjectMeta>,
}

/// Write splits under `dir`: `dir/<split>/<id>_image.raw` (f64),
/// `dir/<split>/<id>_mask.raw` (u8) with headers, and the manifest.
pub fn write_dataset(dir: &Path, splits: &[(&str, Vec<SlicePair>)]) -> Result<()> {
    let mut manifest = Vec::new();
    for (split, pairs) in splits {
        let sub = dir.join(split);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for p in pairs {
            let image = format!("{split}/{}_image.raw", p.id);
            let mask = format!("{split}/{}_mask.raw", p.id);
            let header = RawHeader {
                dims: p.mask.dims().to_vec(),
                spacing: p.mask.spacing().to_vec(),
                dtype: Dtype::F64,
                classes: BTreeMap::new(),
            };
            write_raw(&dir.join(&image), &header, p.image.data())?;
            write_mask(&dir.join(&mask), &p.mask)?;
            let entry = ManifestEntry {
                id: p.id.clone(),
                split: split.to_string(),
                image,
                mask,
                provenance: p.provenance,
                class_counts: p.class_counts(),
                objects: p.objects.clone(),
            };
            manifest.push(serde_json::to_string(&entry).expect("manifest entry serializes"));
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for line in manifest {
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Read the pairs of one split (or all splits when `split` is `None`) of a
/// dataset written by [`write_dataset`], verifying the manifest's class
/// counts.
pub fn load_dataset(dir: &Path, split: Option<&str>) -> Result<Vec<SlicePair>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let here = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::corrupt(format!("{}: {e}", path.display()), Some(here)))?;
        if split.is_some_and(|s| s != entry.split) {
            continue;
        }
        let (ih, values) = read_raw(&dir.join(&entry.image))?;
        let mask = read_mask(&dir.join(&entry.mask))?;
        let [h, w] = mask.dims()[..] else {
            return Err(Error::Shape(format!("{}: dataset slices must be 2-D", entry.id)));
        };
        if ih.dims != [h, w] {
            return Err(Error::Shape(format!("{}: image {:?} vs mask {:?}", entry.id, ih.dims, mask.dims())));
        }
        let pair = SlicePair {
            id: entry.id,
            image: Tensor::new(vec![h, w], values)?,
            mask,
            provenance: entry.provenance,
            objects: entry.objects,
        };
        if pair.class_counts() != entry.class_counts {
            return Err(Error::corrupt(format!("{}: class counts disagree with manifest", pair.id), Some(here)));
        }
        pair.audit()?;
        out.push(pair);
    }
    Ok(out)
}
