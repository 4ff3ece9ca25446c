use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::benchgen::Span;
use crate::fusion::{FusionConfig, Variant};
use crate::training::TrainConfig;
use crate::util::{read_json, sha256_hex};
use crate::vocab::Vocabulary;
use crate::{CoreError, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stamped into every artifact. Equal triples give byte-identical outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

/// Benchmark sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub grid: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub attrs_per_object: Span,
    pub objects_per_scene: Span,
    pub train_quadruplets: usize,
    pub val_quadruplets: usize,
    pub test_quadruplets: usize,
    /// Attribute families swapped between the two objects of a quadruplet.
    pub quad_attributes: usize,
    pub extra_objects: Span,
    pub k_unseen: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            grid: 4,
            train_scenes: 300,
            test_scenes: 40,
            attrs_per_object: Span::new(2, 3),
            objects_per_scene: Span::new(1, 4),
            train_quadruplets: 300,
            val_quadruplets: 16,
            test_quadruplets: 210,
            quad_attributes: 2,
            extra_objects: Span::new(0, 2),
            k_unseen: 30,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return Err(CoreError::Config("train and test scene counts must be positive".into()));
        }
        if self.test_quadruplets == 0 || self.val_quadruplets == 0 {
            return Err(CoreError::Config("validation and test quadruplet counts must be positive".into()));
        }
        if self.k_unseen == 0 {
            return Err(CoreError::Config("k_unseen must be positive so the unseen group exists".into()));
        }
        Ok(())
    }
}

/// Fusion settings shared by every variant unless overridden.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionDefaults {
    pub encoder_layers: usize,
    pub heads: usize,
    pub cls_count: usize,
    pub logit_scale: f64,
    pub positional: bool,
}

impl Default for FusionDefaults {
    fn default() -> Self {
        let f = FusionConfig::default();
        FusionDefaults {
            encoder_layers: f.encoder_layers,
            heads: f.heads,
            cls_count: f.cls_count,
            logit_scale: f.logit_scale,
            positional: f.positional,
        }
    }
}

/// Comparison table layout. Columns are `metric:group` cells of the CSV
/// report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub sort_by: String,
    pub columns: Vec<String>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let columns = [
            "multiobj_t2i:all",
            "multiobj_i2t:all",
            "cola_map:all",
            "cola_map:seen",
            "cola_map:unseen",
            "query_all_map:all",
            "overall_map:all",
            "mean_rank_relevant:all",
            "mean_rank_irrelevant:all",
        ];
        CompareConfig {
            sort_by: "multiobj_t2i:all".into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
        }
    }
}

/// Splits `metric:group`; a bare metric means group `all`.
pub fn parse_cell(spec: &str) -> (String, String) {
    match spec.split_once(':') {
        Some((m, g)) => (m.to_string(), g.to_string()),
        None => (spec.to_string(), "all".to_string()),
    }
}

/// Everything a run depends on. `seed` drives generation, initialisation
/// and batch sampling; it replaces the seeds inside `fusion_overrides` and
/// `training`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
    pub seed: u64,
    pub vocabulary: Vocabulary,
    pub backbone: BackboneConfig,
    pub generation: GenConfig,
    pub fusion: FusionDefaults,
    pub fusion_overrides: BTreeMap<Variant, FusionConfig>,
    pub variants: Vec<Variant>,
    pub training: TrainConfig,
    pub compare: CompareConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: None,
            out_dir: None,
            seed: 0,
            vocabulary: Vocabulary::default(),
            backbone: BackboneConfig::default(),
            generation: GenConfig::default(),
            fusion: FusionDefaults::default(),
            fusion_overrides: BTreeMap::new(),
            variants: Variant::ALL.to_vec(),
            training: TrainConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON document; missing keys take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocabulary.validate()?;
        self.backbone.validate()?;
        self.generation.validate()?;
        if self.generation.grid != self.backbone.grid {
            return Err(CoreError::Config(format!(
                "generation grid {} differs from backbone grid {}",
                self.generation.grid, self.backbone.grid
            )));
        }
        self.training.validate()?;
        if self.variants.is_empty() {
            return Err(CoreError::Config("no variants selected".into()));
        }
        for &v in &self.variants {
            self.fusion_for(v).validate()?;
        }
        if self.compare.columns.is_empty() {
            return Err(CoreError::Config("the comparison needs at least one column".into()));
        }
        Ok(())
    }

    /// Effective fusion config of a variant.
    pub fn fusion_for(&self, variant: Variant) -> FusionConfig {
        let mut c = self.fusion_overrides.get(&variant).cloned().unwrap_or_else(|| FusionConfig {
            encoder_layers: self.fusion.encoder_layers,
            heads: self.fusion.heads,
            cls_count: self.fusion.cls_count,
            logit_scale: self.fusion.logit_scale,
            positional: self.fusion.positional,
            ..FusionConfig::for_variant(variant)
        });
        c.variant = variant;
        c.d_model = self.backbone.d_model;
        c.seed = self.seed;
        c
    }

    /// Effective training config.
    pub fn training_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    /// SHA-256 of the canonical JSON with paths removed, so relocating a run
    /// does not change its artifacts.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data_dir = None;
        c.out_dir = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: self.hash(),
            seed: self.seed,
        }
    }
}
