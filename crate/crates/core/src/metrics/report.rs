//! Report records and their tab-separated text form.
//!
//! ```text
//! class	name	metric	value
//! 1	organ	dsc	97.25
//! 1	organ	rvd	undefined
//! ```
//!
//! Values are printed with the shortest representation that parses back to
//! the same `f64`, so a report survives a write/read cycle unchanged.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{Label, MetricValue};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricKind {
    Dsc,
    Voe,
    Rvd,
    Assd,
    Mssd,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [MetricKind::Dsc, MetricKind::Voe, MetricKind::Rvd, MetricKind::Assd, MetricKind::Mssd];

    pub fn key(self) -> &'static str {
        match self {
            MetricKind::Dsc => "dsc",
            MetricKind::Voe => "voe",
            MetricKind::Rvd => "rvd",
            MetricKind::Assd => "assd",
            MetricKind::Mssd => "mssd",
        }
    }

    pub fn heading(self) -> &'static str {
        match self {
            MetricKind::Dsc => "DSC (%)",
            MetricKind::Voe => "VOE (%)",
            MetricKind::Rvd => "RVD (%)",
            MetricKind::Assd => "ASSD (mm)",
            MetricKind::Mssd => "MSSD (mm)",
        }
    }

    pub fn from_key(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.key() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: Label,
    pub name: String,
    pub dsc: MetricValue,
    pub voe: MetricValue,
    pub rvd: MetricValue,
    pub assd: MetricValue,
    pub mssd: MetricValue,
}

impl ClassMetrics {
    pub fn get(&self, kind: MetricKind) -> MetricValue {
        match kind {
            MetricKind::Dsc => self.dsc,
            MetricKind::Voe => self.voe,
            MetricKind::Rvd => self.rvd,
            MetricKind::Assd => self.assd,
            MetricKind::Mssd => self.mssd,
        }
    }

    fn slot(&mut self, kind: MetricKind) -> &mut MetricValue {
        match kind {
            MetricKind::Dsc => &mut self.dsc,
            MetricKind::Voe => &mut self.voe,
            MetricKind::Rvd => &mut self.rvd,
            MetricKind::Assd => &mut self.assd,
            MetricKind::Mssd => &mut self.mssd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
}

pub const REPORT_HEADER: &str = "class\tname\tmetric\tvalue";

fn parse_value(s: &str) -> Option<MetricValue> {
    match s {
        "undefined" => Some(MetricValue::Undefined),
        "n/a" => Some(MetricValue::NotApplicable),
        _ => s.parse().ok().map(MetricValue::Value),
    }
}

impl MetricsReport {
    pub fn class(&self, class: Label) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.class == class)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for c in &self.classes {
            for kind in MetricKind::ALL {
                let _ = writeln!(out, "{}\t{}\t{}\t{}", c.class, c.name, kind.key(), c.get(kind));
            }
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::corrupt("report header line missing", Some(0)));
        }
        let mut offset = REPORT_HEADER.len() as u64 + 1;
        let mut classes: Vec<ClassMetrics> = Vec::new();
        for line in lines {
            let bad = |what: &str| Error::corrupt(format!("report line `{line}`: {what}"), Some(offset));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let class: Label = f[0].parse().map_err(|_| bad("bad class label"))?;
            let kind = MetricKind::from_key(f[2]).ok_or_else(|| bad("unknown metric"))?;
            let value = parse_value(f[3]).ok_or_else(|| bad("bad value"))?;
            if classes.last().map(|c| c.class) != Some(class) {
                let u = MetricValue::Undefined;
                classes.push(ClassMetrics { class, name: f[1].to_string(), dsc: u, voe: u, rvd: u, assd: u, mssd: u });
            }
            *classes.last_mut().expect("just pushed").slot(kind) = value;
            offset += line.len() as u64 + 1;
        }
        Ok(MetricsReport { classes })
    }
}

/// Mean and sample standard deviation of one metric over cases; flagged
/// cases are counted but left out of the statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub class: Label,
    pub name: String,
    pub metric: MetricKind,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined: usize,
    pub flagged: usize,
}

pub fn aggregate(reports: &[MetricsReport]) -> Vec<Summary> {
    let mut by: BTreeMap<(Label, MetricKind), (String, Vec<f64>, usize)> = BTreeMap::new();
    for r in reports {
        for c in &r.classes {
            for kind in MetricKind::ALL {
                let e = by.entry((c.class, kind)).or_insert_with(|| (c.name.clone(), Vec::new(), 0));
                match c.get(kind) {
                    MetricValue::Value(v) => e.1.push(v),
                    _ => e.2 += 1,
                }
            }
        }
    }
    by.into_iter()
        .map(|((class, metric), (name, vals, flagged))| {
            let n = vals.len();
            let mean = (n > 0).then(|| vals.iter().sum::<f64>() / n as f64);
            let std = mean.map(|m| {
                if n < 2 {
                    0.0
                } else {
                    (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                }
            });
            Summary { class, name, metric, mean, std, defined: n, flagged }
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "class\tname\tmetric\tmean\tstd\tdefined\tflagged";

impl Summary {
    pub fn to_tsv(rows: &[Summary]) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| v.to_string());
        for s in rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.class,
                s.name,
                s.metric.key(),
                opt(s.mean),
                opt(s.std),
                s.defined,
                s.flagged
            );
        }
        out
    }

    /// One row per class, metrics in the usual column order, `mean ± std`.
    pub fn table(rows: &[Summary]) -> String {
        let mut out = String::from("class");
        for k in MetricKind::ALL {
            out.push('\t');
            out.push_str(k.heading());
        }
        out.push('\n');
        let mut classes: Vec<(Label, &str)> = rows.iter().map(|s| (s.class, s.name.as_str())).collect();
        classes.dedup();
        for (class, name) in classes {
            out.push_str(name);
            for k in MetricKind::ALL {
                let cell = rows
                    .iter()
                    .find(|s| s.class == class && s.metric == k)
                    .and_then(|s| Some(format!("{:.2} ± {:.2}", s.mean?, s.std?)))
                    .unwrap_or_else(|| "–".into());
                out.push('\t');
                out.push_str(&cell);
            }
            out.push('\n');
        }
        out
    }
}
