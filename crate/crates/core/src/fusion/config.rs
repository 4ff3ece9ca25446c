use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Linear,
    PromptTune,
    FtLate,
    FtAllAnalog,
    MmPred,
    MmAdapter,
    FlavaStyle,
    AlbefStyle,
    FiberStyle,
    FiberMm,
}

impl Variant {
    /// The nine variants covered by the gradient suite.
    pub const CORE: [Variant; 9] = [
        Variant::Linear,
        Variant::PromptTune,
        Variant::FtLate,
        Variant::MmPred,
        Variant::MmAdapter,
        Variant::FlavaStyle,
        Variant::AlbefStyle,
        Variant::FiberStyle,
        Variant::FiberMm,
    ];

    pub const ALL: [Variant; 10] = [
        Variant::Linear,
        Variant::PromptTune,
        Variant::FtLate,
        Variant::FtAllAnalog,
        Variant::MmPred,
        Variant::MmAdapter,
        Variant::FlavaStyle,
        Variant::AlbefStyle,
        Variant::FiberStyle,
        Variant::FiberMm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Linear => "LINEAR",
            Variant::PromptTune => "PROMPT_TUNE",
            Variant::FtLate => "FT_LATE",
            Variant::FtAllAnalog => "FT_ALL_ANALOG",
            Variant::MmPred => "MM_PRED",
            Variant::MmAdapter => "MM_ADAPTER",
            Variant::FlavaStyle => "FLAVA_STYLE",
            Variant::AlbefStyle => "ALBEF_STYLE",
            Variant::FiberStyle => "FIBER_STYLE",
            Variant::FiberMm => "FIBER_MM",
        }
    }

    /// Head used when the config does not choose one.
    pub fn default_head(self) -> HeadMode {
        match self {
            Variant::MmPred | Variant::FlavaStyle | Variant::AlbefStyle => HeadMode::Pred,
            _ => HeadMode::Adapter,
        }
    }

    /// Whether the head mode can be switched.
    pub fn head_is_selectable(self) -> bool {
        matches!(
            self,
            Variant::FlavaStyle | Variant::AlbefStyle | Variant::FiberStyle | Variant::FiberMm
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim().to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == wanted)
            .ok_or_else(|| CoreError::Config(format!("unknown variant `{s}`")))
    }
}

/// How a fused representation becomes a score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Affine map to a scalar.
    Pred,
    /// Cosine similarity (to the frozen text tokens, or between two CLS outputs).
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub cls_count: usize,
    pub logit_scale: f64,
    pub seed: u64,
    pub head: Option<HeadMode>,
    pub positional: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            variant: Variant::MmAdapter,
            d_model: 64,
            encoder_layers: 2,
            heads: 4,
            cls_count: 1,
            logit_scale: 10.0,
            seed: 0,
            head: None,
            positional: true,
        }
    }
}

impl FusionConfig {
    pub fn for_variant(variant: Variant) -> Self {
        FusionConfig {
            variant,
            ..FusionConfig::default()
        }
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head.unwrap_or_else(|| self.variant.default_head())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        if self.encoder_layers == 0 && self.variant != Variant::FlavaStyle {
            return bad(format!("{} needs at least one encoder layer", self.variant));
        }
        if self.cls_count == 0 {
            return bad("cls_count must be at least 1".into());
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return bad("logit scale must be positive and finite".into());
        }
        if let Some(h) = self.head {
            if h != self.variant.default_head() && !self.variant.head_is_selectable() {
                return bad(format!("{} has a fixed head", self.variant));
            }
        }
        Ok(())
    }
}
