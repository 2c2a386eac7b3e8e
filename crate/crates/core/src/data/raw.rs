//! Raw scalar grids with a plain-text sidecar header.
//!
//! The payload is a little-endian, row-major grid without any framing. The
//! header lives next to it (conventionally `name.hdr` for `name.raw`):
//!
//! ```text
//! munet-raw 1
//! dims 64 64
//! spacing 0.98 0.98
//! dtype u8
//! class 0 background
//! class 1 organ
//! ```
//!
//! `dims` and `spacing` list one value per axis, slowest axis first.
//! `dtype` is one of `u8`, `u16`, `i16`, `f32`, `f64`. `class` lines are
//! optional and only meaningful for label grids. Blank lines and lines
//! starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{Label, SegmentationMask};

pub const RAW_MAGIC: &str = "munet-raw 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    U8,
    U16,
    I16,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 | Dtype::I16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::U16 => "u16",
            Dtype::I16 => "i16",
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn is_integer(self) -> bool {
        matches!(self, Dtype::U8 | Dtype::U16 | Dtype::I16)
    }
}

impl FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "u8" => Dtype::U8,
            "u16" => Dtype::U16,
            "i16" => Dtype::I16,
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            other => return Err(format!("unsupported dtype `{other}`")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawHeader {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub dtype: Dtype,
    pub classes: BTreeMap<Label, String>,
}

impl RawHeader {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn payload_len(&self) -> usize {
        self.voxels() * self.dtype.size()
    }

    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(" ");
        let mut s = format!("{RAW_MAGIC}\n");
        let _ = writeln!(s, "dims {}", join(self.dims.iter().map(|d| d.to_string()).collect()));
        let _ = writeln!(s, "spacing {}", join(self.spacing.iter().map(|d| d.to_string()).collect()));
        let _ = writeln!(s, "dtype {}", self.dtype.as_str());
        for (l, n) in &self.classes {
            let _ = writeln!(s, "class {l} {n}");
        }
        s
    }

    /// Parse header text. Errors carry the byte offset of the offending
    /// line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut offset = 0u64;
        let mut lines = Vec::new();
        for line in text.split_inclusive('\n') {
            lines.push((offset, line.trim_end_matches(['\n', '\r'])));
            offset += line.len() as u64;
        }
        let mut iter = lines.into_iter().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        match iter.next() {
            Some((_, l)) if l.trim() == RAW_MAGIC => {}
            Some((o, l)) => return Err(Error::corrupt(format!("expected `{RAW_MAGIC}`, found `{l}`"), Some(o))),
            None => return Err(Error::corrupt("empty header", Some(0))),
        }
        let (mut dims, mut spacing, mut dtype) = (None, None, None);
        let mut classes = BTreeMap::new();
        for (o, line) in iter {
            let bad = |what: String| Error::corrupt(what, Some(o));
            let mut f = line.split_whitespace();
            let key = f.next().unwrap_or_default();
            let rest: Vec<&str> = f.collect();
            match key {
                "dims" => {
                    let d: Vec<usize> = rest
                        .iter()
                        .map(|v| v.parse().ok().filter(|&d: &usize| d > 0))
                        .collect::<Option<_>>()
                        .ok_or_else(|| bad(format!("bad dims `{line}`")))?;
                    if d.is_empty() {
                        return Err(bad("dims line lists no extents".into()));
                    }
                    dims = Some(d);
                }
                "spacing" => {
                    let s: Vec<f64> = rest
                        .iter()
                        .map(|v| v.parse().ok().filter(|&s: &f64| s > 0.0 && s.is_finite()))
                        .collect::<Option<_>>()
                        .ok_or_else(|| bad(format!("bad spacing `{line}`")))?;
                    spacing = Some(s);
                }
                "dtype" => {
                    let [t] = rest[..] else { return Err(bad(format!("bad dtype line `{line}`"))) };
                    dtype = Some(t.parse::<Dtype>().map_err(bad)?);
                }
                "class" => {
                    if rest.len() < 2 {
                        return Err(bad(format!("bad class line `{line}`")));
                    }
                    let l: Label = rest[0].parse().map_err(|_| bad(format!("bad class label `{}`", rest[0])))?;
                    if classes.insert(l, rest[1..].join(" ")).is_some() {
                        return Err(bad(format!("class {l} declared twice")));
                    }
                }
                other => return Err(bad(format!("unknown header key `{other}`"))),
            }
        }
        let end = text.len() as u64;
        let dims = dims.ok_or_else(|| Error::corrupt("header has no dims line", Some(end)))?;
        let spacing = spacing.ok_or_else(|| Error::corrupt("header has no spacing line", Some(end)))?;
        let dtype = dtype.ok_or_else(|| Error::corrupt("header has no dtype line", Some(end)))?;
        if spacing.len() != dims.len() {
            return Err(Error::corrupt(
                format!("{} spacing values for {} dims", spacing.len(), dims.len()),
                Some(end),
            ));
        }
        Ok(RawHeader { dims, spacing, dtype, classes })
    }
}

/// Header path for a payload path: `x.raw` ↦ `x.hdr`.
pub fn header_path(raw: &Path) -> PathBuf {
    raw.with_extension("hdr")
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    let n = dtype.size();
    bytes
        .chunks_exact(n)
        .map(|c| match dtype {
            Dtype::U8 => c[0] as f64,
            Dtype::U16 => u16::from_le_bytes([c[0], c[1]]) as f64,
            Dtype::I16 => i16::from_le_bytes([c[0], c[1]]) as f64,
            Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
        })
        .collect()
}

fn encode(values: &[f64], dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    for &v in values {
        let range_err = || Error::InvalidArgument(format!("value {v} does not fit dtype {}", dtype.as_str()));
        if dtype.is_integer() && v.fract() != 0.0 {
            return Err(range_err());
        }
        match dtype {
            Dtype::U8 if (0.0..=255.0).contains(&v) => out.push(v as u8),
            Dtype::U16 if (0.0..=65535.0).contains(&v) => out.extend((v as u16).to_le_bytes()),
            Dtype::I16 if (-32768.0..=32767.0).contains(&v) => out.extend((v as i16).to_le_bytes()),
            Dtype::F32 => out.extend((v as f32).to_le_bytes()),
            Dtype::F64 => out.extend(v.to_le_bytes()),
            _ => return Err(range_err()),
        }
    }
    Ok(out)
}

/// Read a payload and its sidecar header.
pub fn read_raw(raw: &Path) -> Result<(RawHeader, Vec<f64>)> {
    let hp = header_path(raw);
    let text = std::fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header = RawHeader::parse(&text)?;
    let bytes = std::fs::read(raw).map_err(|e| Error::io(raw, e))?;
    if bytes.len() != header.payload_len() {
        return Err(Error::corrupt(
            format!(
                "{}: payload has {} bytes, header {:?} × {} needs {}",
                raw.display(),
                bytes.len(),
                header.dims,
                header.dtype.as_str(),
                header.payload_len()
            ),
            Some(bytes.len().min(header.payload_len()) as u64),
        ));
    }
    Ok((header.clone(), decode(&bytes, header.dtype)))
}

/// Write a payload and its sidecar header.
pub fn write_raw(raw: &Path, header: &RawHeader, values: &[f64]) -> Result<()> {
    if values.len() != header.voxels() {
        return Err(Error::Shape(format!("{} values for dims {:?}", values.len(), header.dims)));
    }
    let bytes = encode(values, header.dtype)?;
    let hp = header_path(raw);
    std::fs::write(&hp, header.to_text()).map_err(|e| Error::io(&hp, e))?;
    std::fs::write(raw, bytes).map_err(|e| Error::io(raw, e))
}

/// Store a label mask as `u8` when every label fits, otherwise `u16`.
pub fn write_mask(raw: &Path, mask: &SegmentationMask) -> Result<()> {
    let max = mask.classes().keys().copied().max().unwrap_or(0);
    let header = RawHeader {
        dims: mask.dims().to_vec(),
        spacing: mask.spacing().to_vec(),
        dtype: if max <= 255 { Dtype::U8 } else { Dtype::U16 },
        classes: mask.classes().clone(),
    };
    let values: Vec<f64> = mask.labels().iter().map(|&l| l as f64).collect();
    write_raw(raw, &header, &values)
}

pub fn read_mask(raw: &Path) -> Result<SegmentationMask> {
    let (header, values) = read_raw(raw)?;
    if !matches!(header.dtype, Dtype::U8 | Dtype::U16) {
        return Err(Error::corrupt(format!("label grids must be u8 or u16, found {}", header.dtype.as_str()), None));
    }
    let classes = if header.classes.is_empty() {
        let max = values.iter().fold(0.0f64, |m, &v| m.max(v)) as usize;
        SegmentationMask::numbered_classes(max + 1)
    } else {
        header.classes
    };
    let labels = values.into_iter().map(|v| v as Label).collect();
    SegmentationMask::new(header.dims, header.spacing, labels, classes)
}
