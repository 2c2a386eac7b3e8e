//! Text manifest of a network graph.
//!
//! ```text
//! munet-manifest 1
//! variant munet
//! stages 3
//! ...
//! layer enc1.conv1 conv2d kernel=8x1x3x3 stride=1 out=8x64x64 params=80
//! ...
//! total_params 12345
//! ```
//!
//! The topology hash used by checkpoints is the leading eight bytes of the
//! SHA-256 of this text.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::config::NetworkConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    pub kernel: Vec<usize>,
    pub stride: usize,
    /// Output `channels × height × width`.
    pub out: [usize; 3],
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    text: String,
    total_params: usize,
}

fn join(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl Manifest {
    pub(super) fn new(cfg: &NetworkConfig, layers: &[LayerInfo]) -> Self {
        let mut text = String::from("munet-manifest 1\n");
        let _ = writeln!(text, "variant {}", cfg.variant);
        let _ = writeln!(text, "stages {}", cfg.stages);
        let _ = writeln!(text, "base_features {}", cfg.base_features);
        let _ = writeln!(text, "width_multiplier {}", cfg.width_multiplier);
        let _ = writeln!(text, "in_channels {}", cfg.in_channels);
        let _ = writeln!(text, "out_classes {}", cfg.out_classes);
        let _ = writeln!(text, "input_extent {}", cfg.input_extent);
        for l in layers {
            let _ = write!(text, "layer {} {}", l.name, l.kind);
            if !l.kernel.is_empty() {
                let _ = write!(text, " kernel={} stride={}", join(&l.kernel), l.stride);
            }
            let _ = writeln!(text, " out={} params={}", join(&l.out), l.params);
        }
        let total_params = layers.iter().map(|l| l.params).sum();
        let _ = writeln!(text, "total_params {total_params}");
        Manifest { text, total_params }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn total_params(&self) -> usize {
        self.total_params
    }

    pub fn topology_hash(&self) -> u64 {
        let digest = Sha256::digest(self.text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    /// Sum of the `params=` fields of every `layer` line in manifest text.
    pub fn parse_total(text: &str) -> Option<usize> {
        text.lines()
            .filter(|l| l.starts_with("layer "))
            .map(|l| {
                l.split_whitespace()
                    .find_map(|f| f.strip_prefix("params="))
                    .and_then(|v| v.parse::<usize>().ok())
            })
            .sum()
    }
}
