use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Unet,
    Munet,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Unet => "unet",
            Variant::Munet => "munet",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Variant::Unet),
            "munet" => Ok(Variant::Munet),
            other => Err(Error::Config(format!("unknown network variant `{other}`"))),
        }
    }
}

/// Rational factor applied to every feature width, written `num/den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct WidthMultiplier {
    pub num: usize,
    pub den: usize,
}

impl WidthMultiplier {
    pub const ONE: WidthMultiplier = WidthMultiplier { num: 1, den: 1 };

    pub fn new(num: usize, den: usize) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("width multiplier {num}/{den} must be positive")));
        }
        Ok(WidthMultiplier { num, den })
    }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for WidthMultiplier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad width multiplier `{s}`")))
        };
        match s.split_once('/') {
            Some((n, d)) => WidthMultiplier::new(parse(n)?, parse(d)?),
            None => WidthMultiplier::new(parse(s)?, 1),
        }
    }
}

impl TryFrom<String> for WidthMultiplier {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WidthMultiplier> for String {
    fn from(w: WidthMultiplier) -> String {
        w.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub stages: usize,
    pub base_features: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub input_extent: usize,
    pub variant: Variant,
    pub width_multiplier: WidthMultiplier,
}

impl Default for NetworkConfig {
    /// Full-size geometry: five stages, 64 → 1024 features, 512² inputs.
    fn default() -> Self {
        NetworkConfig {
            stages: 5,
            base_features: 64,
            in_channels: 1,
            out_classes: 3,
            input_extent: 512,
            variant: Variant::Munet,
            width_multiplier: WidthMultiplier::ONE,
        }
    }
}

impl NetworkConfig {
    /// Three stages at one eighth width on 64² inputs.
    pub fn desk() -> Self {
        NetworkConfig {
            stages: 3,
            input_extent: 64,
            width_multiplier: WidthMultiplier { num: 1, den: 8 },
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Feature width of the first stage after applying the multiplier.
    pub fn stage1_features(&self) -> usize {
        self.base_features * self.width_multiplier.num / self.width_multiplier.den
    }

    /// Feature width of stage `s` (1-based); doubles per stage.
    pub fn features(&self, stage: usize) -> usize {
        self.stage1_features() << (stage - 1)
    }

    /// Spatial extent of feature maps at stage `s` (1-based).
    pub fn extent(&self, stage: usize) -> usize {
        self.input_extent >> (stage - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(Error::Config(format!("need at least 2 stages, got {}", self.stages)));
        }
        if self.stages > 12 {
            return Err(Error::Config(format!("{} stages is not a sane depth", self.stages)));
        }
        if self.in_channels == 0 || self.out_classes == 0 || self.base_features == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let w = self.width_multiplier;
        if w.num == 0 || w.den == 0 || (self.base_features * w.num) % w.den != 0 {
            return Err(Error::Config(format!(
                "width multiplier {w} does not divide base features {}",
                self.base_features
            )));
        }
        let factor = 1usize << (self.stages - 1);
        if self.input_extent == 0 || self.input_extent % factor != 0 {
            return Err(Error::Config(format!(
                "input extent {} not divisible by 2^(stages-1) = {factor}",
                self.input_extent
            )));
        }
        Ok(())
    }
}
