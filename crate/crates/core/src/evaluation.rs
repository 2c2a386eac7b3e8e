//! Network predictions scored against labelled slices.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::analysis::SizeLabel;
use crate::data::synthetic::{LESION, ORGAN};
use crate::data::{prediction_mask, scale_intensity, Provenance, SlicePair, HU_HIGH, HU_LOW};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, object_dsc, Label, MetricsReport, SegmentationMask};
use crate::network::NetworkGraph;
use crate::tensor::Tensor;

/// Neighbourhood margin (pixels) around an object for its local Dice.
pub const OBJECT_MARGIN: usize = 2;

const PREDICT_BATCH: usize = 4;

/// Hard label masks predicted for `pairs`, in order.
pub fn predict_masks(net: &mut NetworkGraph, pairs: &[SlicePair]) -> Result<Vec<SegmentationMask>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(PREDICT_BATCH) {
        let images = chunk
            .iter()
            .map(|p| scale_intensity(&p.image, HU_LOW, HU_HIGH))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = images.iter().collect();
        let x = Tensor::stack(&refs)?;
        let (n, h, w) = (chunk.len(), x.shape()[1], x.shape()[2]);
        let x = x.reshape(vec![n, 1, h, w])?;
        let scores = net.predict(&x)?;
        for (i, p) in chunk.iter().enumerate() {
            out.push(prediction_mask(&scores.batch_item(i)?, &p.mask)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectScore {
    pub case: String,
    pub object: usize,
    pub class: Label,
    pub native_pixels: usize,
    pub size: SizeLabel,
    pub dsc: f64,
}

pub fn object_scores(pair: &SlicePair, pred: &SegmentationMask) -> Vec<ObjectScore> {
    pair.object_masks()
        .into_iter()
        .zip(&pair.objects)
        .map(|(m, meta)| {
            let px: Vec<usize> = (0..m.mask.len()).filter(|&i| m.mask[i]).collect();
            // Synthetic organs include their lesions, so lesion predictions
            // inside them count as organ hits.
            let dsc = if pair.provenance == Provenance::Synthetic && meta.class == ORGAN {
                let merged = pred.labels().iter().map(|&l| if l == LESION { ORGAN } else { l }).collect();
                let merged = SegmentationMask::new(pred.dims().to_vec(), pred.spacing().to_vec(), merged, pred.classes().clone())
                    .expect("relabelling keeps labels in the class map");
                object_dsc(&merged, &px, ORGAN, OBJECT_MARGIN)
            } else {
                object_dsc(pred, &px, meta.class, OBJECT_MARGIN)
            };
            ObjectScore {
                case: pair.id.clone(),
                object: meta.id,
                class: meta.class,
                native_pixels: meta.pixels,
                size: meta.size.label,
                dsc,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub cases: Vec<(String, MetricsReport)>,
    pub objects: Vec<ObjectScore>,
}

/// Score `preds` against `pairs` (same order).
pub fn score(pairs: &[SlicePair], preds: &[SegmentationMask]) -> Result<Evaluation> {
    if pairs.len() != preds.len() {
        return Err(Error::InvalidArgument(format!("{} cases but {} predictions", pairs.len(), preds.len())));
    }
    let mut cases = Vec::with_capacity(pairs.len());
    let mut objects = Vec::new();
    for (p, pred) in pairs.iter().zip(preds) {
        cases.push((p.id.clone(), evaluate(pred, &p.mask)?));
        objects.extend(object_scores(p, pred));
    }
    Ok(Evaluation { cases, objects })
}

pub fn evaluate_network(net: &mut NetworkGraph, pairs: &[SlicePair]) -> Result<Evaluation> {
    let preds = predict_masks(net, pairs)?;
    score(pairs, &preds)
}

impl Evaluation {
    pub fn reports(&self) -> Vec<MetricsReport> {
        self.cases.iter().map(|(_, r)| r.clone()).collect()
    }

    /// Mean Dice of one class over cases where it is defined.
    pub fn mean_dsc(&self, class: Label) -> Option<f64> {
        let v: Vec<f64> = self.cases.iter().filter_map(|(_, r)| r.class(class)?.dsc.value()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Per-case records: the report lines prefixed by the case id.
    pub fn per_case_tsv(&self) -> String {
        let mut out = String::from("case\tclass\tname\tmetric\tvalue\n");
        for (id, r) in &self.cases {
            for line in r.to_tsv().lines().skip(1) {
                let _ = writeln!(out, "{id}\t{line}");
            }
        }
        out
    }

    pub fn objects_tsv(&self) -> String {
        let mut out = String::from("case\tobject\tclass\tnative_pixels\tsize\tdsc\n");
        for o in &self.objects {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", o.case, o.object, o.class, o.native_pixels, o.size.as_str(), o.dsc);
        }
        out
    }

    /// Mean object Dice grouped by `(class, size class)`: `(count, mean)`.
    pub fn size_class_dsc(&self) -> BTreeMap<(Label, SizeLabel), (usize, f64)> {
        let mut acc: BTreeMap<(Label, SizeLabel), (usize, f64)> = BTreeMap::new();
        for o in &self.objects {
            let e = acc.entry((o.class, o.size)).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += o.dsc;
        }
        acc.into_iter().map(|(k, (n, s))| (k, (n, s / n as f64))).collect()
    }
}
