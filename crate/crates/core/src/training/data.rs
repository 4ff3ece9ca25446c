//! Training pairs, their encoded features, and batch sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ImageFeatures, QueryFeatures, SyntheticBackbone};
use crate::benchgen::Quadruplet;
use crate::scene::{Query, Scene};
use crate::util::stable_hash;
use crate::vocab::Vocabulary;
use crate::{CoreError, Result};

/// A positive (scene, query) training pair, by index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Item {
    pub scene: usize,
    pub query: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingData {
    pub scenes: Vec<Scene>,
    pub queries: Vec<Query>,
    /// Single-object pairs.
    pub single: Vec<Item>,
    /// Multi-object pairs: both halves of every quadruplet.
    pub multi: Vec<Item>,
    /// `(I, M)` and `(I', M')` of each quadruplet.
    pub quads: Vec<[Item; 2]>,
}

impl TrainingData {
    /// Single-object pairs are every instance of every scene with each of
    /// its attribute subsets of size two or more.
    pub fn build(vocab: &Vocabulary, single_scenes: &[Scene], quads: &[Quadruplet]) -> Result<Self> {
        let mut data = TrainingData::default();
        let mut query_ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut intern = |data: &mut TrainingData, q: Query| {
            *query_ids.entry(q.query_id.clone()).or_insert_with(|| {
                data.queries.push(q);
                data.queries.len() - 1
            })
        };
        for scene in single_scenes {
            let s = data.scenes.len();
            data.scenes.push(scene.clone());
            for q in crate::benchgen::compounds_in(vocab, std::slice::from_ref(scene))? {
                let qi = intern(&mut data, q);
                data.single.push(Item { scene: s, query: qi });
            }
        }
        for quad in quads {
            let mut pair = [Item { scene: 0, query: 0 }; 2];
            for (k, (scene, caption)) in [(&quad.image, &quad.caption), (&quad.distractor, &quad.swapped)]
                .into_iter()
                .enumerate()
            {
                let s = data.scenes.len();
                data.scenes.push(scene.clone());
                let qi = intern(&mut data, caption.clone());
                pair[k] = Item { scene: s, query: qi };
                data.multi.push(pair[k]);
            }
            data.quads.push(pair);
        }
        Ok(data)
    }
}

/// Frozen features for every scene and query of a [`TrainingData`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedData {
    pub images: Vec<ImageFeatures>,
    pub queries: Vec<QueryFeatures>,
}

/// Noise seed used for a scene everywhere in the pipeline.
pub fn scene_noise_seed(scene: &Scene) -> u64 {
    stable_hash(&scene.scene_id)
}

pub fn encode_scenes(backbone: &SyntheticBackbone, scenes: &[Scene]) -> Result<Vec<ImageFeatures>> {
    scenes.iter().map(|s| backbone.encode_scene(s, scene_noise_seed(s))).collect()
}

pub fn encode_queries(backbone: &SyntheticBackbone, queries: &[Query]) -> Result<Vec<QueryFeatures>> {
    queries.iter().map(|q| backbone.encode_query(q)).collect()
}

impl EncodedData {
    pub fn new(backbone: &SyntheticBackbone, data: &TrainingData) -> Result<Self> {
        Ok(EncodedData {
            images: encode_scenes(backbone, &data.scenes)?,
            queries: encode_queries(backbone, &data.queries)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BatchMode {
    SingleObj,
    MultiObj,
    HardNeg,
    Combined,
}

impl fmt::Display for BatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BatchMode::SingleObj => "SINGLE_OBJ",
            BatchMode::MultiObj => "MULTI_OBJ",
            BatchMode::HardNeg => "HARD_NEG",
            BatchMode::Combined => "COMBINED",
        })
    }
}

impl FromStr for BatchMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "SINGLE_OBJ" => Ok(BatchMode::SingleObj),
            "MULTI_OBJ" => Ok(BatchMode::MultiObj),
            "HARD_NEG" => Ok(BatchMode::HardNeg),
            "COMBINED" => Ok(BatchMode::Combined),
            other => Err(CoreError::Config(format!("unknown batch mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchStrategy {
    pub mode: BatchMode,
    pub batch_size: usize,
    /// COMBINED only: probability that a two-item slot is a whole quadruplet.
    #[serde(default)]
    pub hard_ratio: f64,
}

impl BatchStrategy {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch size must be positive".into()));
        }
        if matches!(self.mode, BatchMode::HardNeg | BatchMode::Combined) && self.batch_size % 2 != 0 {
            return Err(CoreError::Config(format!("{} batches need an even size", self.mode)));
        }
        if !(0.0..=1.0).contains(&self.hard_ratio) {
            return Err(CoreError::Config("hard_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Where the items of a batch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Single,
    Multi,
    Quad,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledBatch {
    pub items: Vec<Item>,
    pub origins: Vec<Origin>,
}

fn need<'a, T>(pool: &'a [T], what: &str, mode: BatchMode) -> Result<&'a [T]> {
    if pool.is_empty() {
        return Err(CoreError::Sampling(format!("{mode} batches need {what}, the dataset has none")));
    }
    Ok(pool)
}

pub fn sample_batch<R: Rng + ?Sized>(strategy: &BatchStrategy, data: &TrainingData, rng: &mut R) -> Result<SampledBatch> {
    strategy.validate()?;
    let n = strategy.batch_size;
    let mut items = Vec::with_capacity(n);
    let mut origins = Vec::with_capacity(n);
    match strategy.mode {
        BatchMode::SingleObj => {
            let pool = need(&data.single, "single-object pairs", strategy.mode)?;
            for _ in 0..n {
                items.push(*pool.choose(rng).expect("non-empty"));
                origins.push(Origin::Single);
            }
        }
        BatchMode::MultiObj => {
            let pool = need(&data.multi, "multi-object pairs", strategy.mode)?;
            for _ in 0..n {
                items.push(*pool.choose(rng).expect("non-empty"));
                origins.push(Origin::Multi);
            }
        }
        BatchMode::HardNeg => {
            let pool = need(&data.quads, "quadruplets", strategy.mode)?;
            for _ in 0..n / 2 {
                items.extend_from_slice(pool.choose(rng).expect("non-empty"));
                origins.extend([Origin::Quad; 2]);
            }
        }
        BatchMode::Combined => {
            let either = data.single.len() + data.multi.len();
            if either == 0 {
                return Err(CoreError::Sampling("COMBINED batches need pairs, the dataset has none".into()));
            }
            if strategy.hard_ratio > 0.0 {
                need(&data.quads, "quadruplets", strategy.mode)?;
            }
            for _ in 0..n / 2 {
                if strategy.hard_ratio > 0.0 && rng.random::<f64>() < strategy.hard_ratio {
                    items.extend_from_slice(data.quads.choose(rng).expect("checked"));
                    origins.extend([Origin::Quad; 2]);
                } else {
                    for _ in 0..2 {
                        let k = rng.random_range(0..either);
                        if k < data.single.len() {
                            items.push(data.single[k]);
                            origins.push(Origin::Single);
                        } else {
                            items.push(data.multi[k - data.single.len()]);
                            origins.push(Origin::Multi);
                        }
                    }
                }
            }
        }
    }
    Ok(SampledBatch { items, origins })
}
