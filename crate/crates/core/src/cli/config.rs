//! Run configuration: a TOML file with one table per section, overridden by
//! `section.key=value` assignments from the command line.
//!
//! ```toml
//! [paths]
//! data = "runs/data"
//!
//! [network]
//! variant = "munet"
//! width_multiplier = "1/8"
//!
//! [train]
//! max_epochs = 500
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::analysis::BranchRule;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::training::TrainConfig;

pub const FROZEN_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Dataset split to evaluate or analyze.
    pub split: String,
    /// Validation cadence during training in epochs; 0 evaluates only the
    /// final network.
    pub every: u64,
    /// Score the ground truth against itself instead of a network.
    pub ground_truth: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { split: "test".into(), every: 0, ground_truth: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub rule: BranchRule,
    pub per_channel: bool,
    pub size_threshold: usize,
    pub reference_stage: usize,
    pub zero_residual: bool,
    /// Write normalized maps as PGM files.
    pub dump_maps: bool,
    /// Extra tap points whose normalized maps are dumped with the others.
    pub taps: Vec<String>,
    /// Analyze at most this many slices; 0 means all.
    pub limit: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            rule: BranchRule::AllBelow,
            per_channel: false,
            size_threshold: 65,
            reference_stage: 1,
            zero_residual: false,
            dump_maps: false,
            taps: Vec::new(),
            limit: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub seed: u64,
    /// Scale applied to convolution-kernel gradients; 1 leaves them intact.
    pub fault_scale: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { eps: 1e-5, seed: 0, fault_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// 0 quiet, 1 progress, 2 per-epoch detail.
    pub verbosity: u8,
    pub paths: Paths,
    pub data: SyntheticSpec,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults: three stages at one-eighth width on 64² slices.
    fn default() -> Self {
        RunConfig {
            verbosity: 1,
            paths: Paths::default(),
            data: SyntheticSpec::default(),
            network: NetworkConfig::desk(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Parse the right-hand side of an override as a TOML value, falling back
/// to a plain string (`variant=unet`).
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Apply `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file (if any), then the overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let defaults = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        let merged = merge(defaults, table);
        let cfg: RunConfig = Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Write the resolved configuration into `dir`.
    pub fn freeze(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(FROZEN_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => {
                let merged = merge(std::mem::take(b), o);
                *b = merged;
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}
