use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type Label = u16;

/// Integer label grid (`H × W` or `D × H × W`) with physical voxel spacing
/// in millimetres, one entry per axis in the same order as `dims`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    labels: Vec<Label>,
    classes: BTreeMap<Label, String>,
}

impl SegmentationMask {
    pub fn new(
        dims: Vec<usize>,
        spacing: Vec<f64>,
        labels: Vec<Label>,
        classes: BTreeMap<Label, String>,
    ) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) || dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("mask must be 2-D or 3-D with positive extents, got {dims:?}")));
        }
        if spacing.len() != dims.len() || spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing {spacing:?} must hold {} strictly positive values",
                dims.len()
            )));
        }
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(Error::Shape(format!("{dims:?} needs {n} labels, got {}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|l| !classes.contains_key(l)) {
            return Err(Error::InvalidArgument(format!("label {bad} is not in the class map")));
        }
        Ok(SegmentationMask { dims, spacing, labels, classes })
    }

    /// Class map `0..n` named `class0`, `class1`, ….
    pub fn numbered_classes(n: usize) -> BTreeMap<Label, String> {
        (0..n as Label).map(|c| (c, format!("class{c}"))).collect()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn classes(&self) -> &BTreeMap<Label, String> {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn with_spacing(mut self, spacing: Vec<f64>) -> Result<Self> {
        let labels = std::mem::take(&mut self.labels);
        Self::new(self.dims, spacing, labels, self.classes)
    }

    pub fn count(&self, class: Label) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn binary(&self, class: Label) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    /// Stack equally sized 2-D slices into a volume whose first axis has
    /// spacing `thickness`.
    pub fn stack(slices: &[SegmentationMask], thickness: f64) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::InvalidArgument("no slices to stack".into()))?;
        if first.dims.len() != 2 {
            return Err(Error::Shape("only 2-D masks can be stacked".into()));
        }
        let mut labels = Vec::with_capacity(first.len() * slices.len());
        for s in slices {
            s.expect_aligned(first)?;
            labels.extend_from_slice(&s.labels);
        }
        let dims = vec![slices.len(), first.dims[0], first.dims[1]];
        let spacing = vec![thickness, first.spacing[0], first.spacing[1]];
        Self::new(dims, spacing, labels, first.classes.clone())
    }

    pub fn expect_aligned(&self, other: &SegmentationMask) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("mask extents differ: {:?} vs {:?}", self.dims, other.dims)));
        }
        if self.spacing != other.spacing {
            return Err(Error::InvalidArgument(format!(
                "mask spacing differs: {:?} vs {:?}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }

    /// Extents padded to three axes with a leading 1 for 2-D masks.
    pub(crate) fn dims3(&self) -> [usize; 3] {
        match self.dims[..] {
            [h, w] => [1, h, w],
            [d, h, w] => [d, h, w],
            _ => unreachable!("validated rank"),
        }
    }

    pub(crate) fn spacing3(&self) -> [f64; 3] {
        match self.spacing[..] {
            [sh, sw] => [1.0, sh, sw],
            [sd, sh, sw] => [sd, sh, sw],
            _ => unreachable!("validated rank"),
        }
    }
}
