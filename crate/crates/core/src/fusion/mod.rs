//! Scoring strategies f(I, Q) over frozen features.
//!
//! Every variant implements [`FusionStrategy`] and is registered by name;
//! [`FusionModel`] pairs a config with its trainable parameters and looks
//! the strategy up at run time.

mod blocks;
mod checkpoint;
mod config;
mod disjoint;
mod joint;
mod zoo;

use std::collections::BTreeMap;

use bindlab_tensor::{BoundParams, Graph, ParameterSet, Var};

use crate::backbone::{BackboneConfig, FeatureBundle, ImageFeatures, QueryFeatures, SyntheticBackbone};
use crate::vocab::Vocabulary;
use crate::{CoreError, Result};

pub use blocks::{ModelDims, PairBatch, FFN_EXPANSION, LAYER_NORM_EPS};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{FusionConfig, HeadMode, Variant};

/// One way of turning a batch of (image, query) pairs into scores.
pub trait FusionStrategy: Sync {
    fn variant(&self) -> Variant;

    fn name(&self) -> &'static str {
        self.variant().name()
    }

    /// Seeded initial parameters.
    fn init(&self, cfg: &FusionConfig, backbone: &SyntheticBackbone) -> Result<ParameterSet>;

    /// Records the scores of `batch.pairs` on `g`, as an `[n_pairs × 1]` node.
    fn score_pairs(&self, cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, batch: &PairBatch) -> Result<Var>;
}

static REGISTRY: [&dyn FusionStrategy; 10] = [
    &disjoint::Linear,
    &disjoint::PromptTune,
    &disjoint::FtLate,
    &disjoint::FtAllAnalog,
    &joint::MmPred,
    &joint::MmAdapter,
    &zoo::FlavaStyle,
    &zoo::AlbefStyle,
    &zoo::FiberStyle,
    &zoo::FiberMm,
];

pub fn registry() -> &'static [&'static dyn FusionStrategy] {
    &REGISTRY
}

pub fn strategy(variant: Variant) -> &'static dyn FusionStrategy {
    *REGISTRY
        .iter()
        .find(|s| s.variant() == variant)
        .expect("every variant is registered")
}

pub fn lookup(name: &str) -> Result<&'static dyn FusionStrategy> {
    let variant: Variant = name.parse()?;
    Ok(strategy(variant))
}

pub(crate) fn dims_of(backbone: &SyntheticBackbone) -> ModelDims {
    let c = backbone.config();
    ModelDims {
        d_model: c.d_model,
        patches: c.patches(),
        max_tokens: c.max_tokens,
    }
}

/// Pairs scored per graph when no gradient is needed.
const SCORE_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    config: FusionConfig,
    backbone: BackboneConfig,
    vocab: Vocabulary,
    params: ParameterSet,
    /// Free-form provenance stored in checkpoints.
    metadata: BTreeMap<String, String>,
}

pub fn init_model(config: FusionConfig, backbone: &SyntheticBackbone) -> Result<FusionModel> {
    config.validate()?;
    if config.d_model != backbone.d_model() {
        return Err(CoreError::Config(format!(
            "fusion width {} differs from backbone width {}",
            config.d_model,
            backbone.d_model()
        )));
    }
    let params = strategy(config.variant).init(&config, backbone)?;
    Ok(FusionModel {
        config,
        backbone: backbone.config().clone(),
        vocab: backbone.vocab().clone(),
        params,
        metadata: BTreeMap::new(),
    })
}

impl FusionModel {
    pub(crate) fn from_parts(
        config: FusionConfig,
        backbone: BackboneConfig,
        vocab: Vocabulary,
        params: ParameterSet,
    ) -> Result<Self> {
        config.validate()?;
        let model = FusionModel {
            config,
            backbone,
            vocab,
            params,
            metadata: BTreeMap::new(),
        };
        let fresh = init_model(model.config.clone(), &model.rebuild_backbone()?)?;
        if !fresh.params.same_layout(&model.params) {
            return Err(CoreError::Contract(format!(
                "parameters do not match the {} layout",
                model.config.variant
            )));
        }
        Ok(model)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.to_string(), value.into());
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn strategy(&self) -> &'static dyn FusionStrategy {
        strategy(self.config.variant)
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        &self.backbone
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// The frozen backbone this model was initialised against.
    pub fn rebuild_backbone(&self) -> Result<SyntheticBackbone> {
        SyntheticBackbone::new(self.backbone.clone(), self.vocab.clone())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_model: self.backbone.d_model,
            patches: self.backbone.patches(),
            max_tokens: self.backbone.max_tokens,
        }
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Scores of `batch.pairs` recorded on `g` as an `[n_pairs × 1]` node.
    pub fn score_on(&self, g: &mut Graph, bound: &BoundParams, batch: &PairBatch) -> Result<Var> {
        batch.validate(&self.dims())?;
        self.strategy().score_pairs(&self.config, g, bound, batch)
    }

    /// Full `[n_images × n_queries]` score matrix recorded on `g`.
    pub fn score_matrix_on(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        images: &[&ImageFeatures],
        queries: &[&QueryFeatures],
    ) -> Result<Var> {
        let pairs = all_pairs(images.len(), queries.len());
        let batch = PairBatch {
            images,
            queries,
            pairs: &pairs,
        };
        let s = self.score_on(g, bound, &batch)?;
        Ok(g.reshape(s, vec![images.len(), queries.len()])?)
    }

    /// Scores of arbitrary pairs, evaluated without gradients.
    pub fn score_pairs(
        &self,
        images: &[&ImageFeatures],
        queries: &[&QueryFeatures],
        pairs: &[(usize, usize)],
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(SCORE_CHUNK) {
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, false);
            let batch = PairBatch {
                images,
                queries,
                pairs: chunk,
            };
            let s = self.score_on(&mut g, &bound, &batch)?;
            out.extend_from_slice(g.values(s));
        }
        if let Some(bad) = out.iter().position(|v| !v.is_finite()) {
            let (i, j) = pairs[bad];
            return Err(CoreError::Contract(format!("non-finite score for image {i}, query {j}")));
        }
        Ok(out)
    }

    /// `[n_images][n_queries]` scores; entry `(i, j)` equals the single score
    /// of image `i` against query `j`.
    pub fn score_matrix(&self, images: &[&ImageFeatures], queries: &[&QueryFeatures]) -> Result<Vec<Vec<f64>>> {
        if queries.is_empty() {
            return Ok(vec![Vec::new(); images.len()]);
        }
        let flat = self.score_pairs(images, queries, &all_pairs(images.len(), queries.len()))?;
        Ok(flat.chunks(queries.len()).map(<[f64]>::to_vec).collect())
    }

    pub fn score_features(&self, image: &ImageFeatures, query: &QueryFeatures) -> Result<f64> {
        Ok(self.score_pairs(&[image], &[query], &[(0, 0)])?[0])
    }

    /// Score of the image-caption pair in one bundle.
    pub fn score(&self, bundle: &FeatureBundle) -> Result<f64> {
        self.score_features(&bundle.image, &bundle.query)
    }
}

pub fn all_pairs(n_images: usize, n_queries: usize) -> Vec<(usize, usize)> {
    (0..n_images).flat_map(|i| (0..n_queries).map(move |j| (i, j))).collect()
}
