//! A frozen stand-in for a pretrained two-tower encoder.
//!
//! Each occupied cell becomes `(object + Σ attributes + σ·noise)·P`, each empty
//! cell `(background + σ·noise)·P`, with fixed random unit embeddings and a
//! fixed random projection `P`. Token features are the projected, normalized
//! concept embeddings, so the pooled image and pooled text live in the same
//! space. Because every cell adds its concepts linearly, the mean over
//! patches only sees the multiset of concepts: exchanging attributes between
//! two objects leaves the pooled image unchanged, while individual patch rows
//! still differ.
//!
//! All table entries are snapped to a 2⁻²⁰ grid, which keeps the noise-free
//! sums exact so that "unchanged" holds bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use bindlab_tensor::Tensor;

use crate::scene::{Query, Scene};
use crate::util::{mix_seed, snap};
use crate::vocab::Vocabulary;
use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub seed: u64,
    pub d_model: usize,
    pub grid: usize,
    pub noise_sigma: f64,
    pub max_tokens: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            seed: 7,
            d_model: 64,
            grid: 4,
            noise_sigma: 0.05,
            max_tokens: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.grid == 0 || self.max_tokens == 0 {
            return Err(CoreError::Config(format!("degenerate backbone {self:?}")));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(CoreError::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }
}

/// Image-side features: patch rows, their mean, and (for scenes encoded
/// here) the pre-projection cell vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub patches: Tensor,
    pub pooled: Vec<f64>,
    pub inputs: Option<Tensor>,
}

/// Text-side features: one row per token, their mean, and token ids when the
/// caption was encoded by a [`SyntheticBackbone`].
#[derive(Clone, Debug, PartialEq)]
pub struct QueryFeatures {
    pub tokens: Tensor,
    pub pooled: Vec<f64>,
    pub token_ids: Option<Vec<usize>>,
}

/// Frozen-backbone output for one image-caption pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub id: String,
    pub image: ImageFeatures,
    pub query: QueryFeatures,
}

impl FeatureBundle {
    pub fn patch_features(&self) -> &Tensor {
        &self.image.patches
    }

    pub fn token_features(&self) -> &Tensor {
        &self.query.tokens
    }

    pub fn pooled_image(&self) -> &[f64] {
        &self.image.pooled
    }

    pub fn pooled_text(&self) -> &[f64] {
        &self.query.pooled
    }
}

/// Mean of the rows of a matrix.
pub fn row_mean(m: &Tensor) -> Vec<f64> {
    let (r, c) = m.dims2().expect("feature matrices are 2-d");
    bindlab_tensor_mean(m.values(), r, c)
}

fn bindlab_tensor_mean(values: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in values.chunks(c).take(r) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|v| *v /= r as f64);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBackbone {
    config: BackboneConfig,
    vocab: Vocabulary,
    objects: Tensor,
    attributes: Tensor,
    background: Vec<f64>,
    token_names: Vec<String>,
    token_table: Tensor,
    projection: Tensor,
}

fn unit_row(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    normalized_snapped(&v)
}

fn normalized_snapped(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| snap(x / n)).collect()
}

/// `x·P` for a row vector, summed in index order.
fn project(x: &[f64], p: &Tensor) -> Vec<f64> {
    let d = x.len();
    let pv = p.values();
    let mut out = vec![0.0; d];
    for (k, &xk) in x.iter().enumerate() {
        let row = &pv[k * d..(k + 1) * d];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += xk * w;
        }
    }
    out
}

impl SyntheticBackbone {
    pub fn new(config: BackboneConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        vocab.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let objects: Vec<f64> = (0..vocab.objects.len()).flat_map(|_| unit_row(&mut rng, d)).collect();
        let attributes: Vec<f64> = (0..vocab.attributes.len()).flat_map(|_| unit_row(&mut rng, d)).collect();
        let background = unit_row(&mut rng, d);
        let scale = 1.0 / (d as f64).sqrt();
        let projection: Vec<f64> = (0..d * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                snap(z * scale)
            })
            .collect();
        let projection = Tensor::from_vec(vec![d, d], projection)?;
        let relation = unit_row(&mut rng, d);

        let token_names = vocab.tokens();
        let mut token_rows = Vec::with_capacity(token_names.len() * d);
        for k in 0..vocab.objects.len() {
            token_rows.extend(normalized_snapped(&project(&objects[k * d..(k + 1) * d], &projection)));
        }
        for k in 0..vocab.attributes.len() {
            token_rows.extend(normalized_snapped(&project(&attributes[k * d..(k + 1) * d], &projection)));
        }
        token_rows.extend(relation);

        Ok(SyntheticBackbone {
            objects: Tensor::from_vec(vec![vocab.objects.len(), d], objects)?,
            attributes: Tensor::from_vec(vec![vocab.attributes.len(), d], attributes)?,
            background,
            token_table: Tensor::from_vec(vec![token_names.len(), d], token_rows)?,
            token_names,
            projection,
            config,
            vocab,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn token_table(&self) -> &Tensor {
        &self.token_table
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn object_table(&self) -> &Tensor {
        &self.objects
    }

    pub fn attribute_table(&self) -> &Tensor {
        &self.attributes
    }

    pub fn token_names(&self) -> &[String] {
        &self.token_names
    }

    pub fn token_id(&self, token: &str) -> Result<usize> {
        self.token_names
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| CoreError::Vocabulary(format!("unknown token `{token}`")))
    }

    /// Pre-projection cell vectors, one row per cell.
    pub fn scene_inputs(&self, scene: &Scene, noise_seed: u64) -> Result<Tensor> {
        if scene.grid != self.config.grid {
            return Err(CoreError::Contract(format!(
                "scene {} has grid {}, backbone expects {}",
                scene.scene_id, scene.grid, self.config.grid
            )));
        }
        scene.validate(&self.vocab)?;
        let d = self.config.d_model;
        let cells = self.config.patches();
        let mut rows: Vec<Vec<f64>> = vec![self.background.clone(); cells];
        for p in &scene.placements {
            let oi = self.vocab.object_index(&p.object)?;
            let row = &mut rows[p.cell];
            row.copy_from_slice(self.objects.row(oi));
            for a in &p.attributes {
                let ai = self.vocab.attribute_index(a)?;
                row.iter_mut()
                    .zip(self.attributes.row(ai))
                    .for_each(|(x, e)| *x += e);
            }
        }
        let sigma = self.config.noise_sigma;
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, noise_seed));
            let scale = sigma / (d as f64).sqrt();
            for row in rows.iter_mut() {
                for x in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += scale * z;
                }
            }
        }
        Ok(Tensor::from_vec(vec![cells, d], rows.concat())?)
    }

    /// Patch features of a scene. Deterministic in `(backbone seed, scene, noise_seed)`.
    pub fn encode_scene(&self, scene: &Scene, noise_seed: u64) -> Result<ImageFeatures> {
        let inputs = self.scene_inputs(scene, noise_seed)?;
        let (cells, d) = inputs.dims2()?;
        let mut patches = Vec::with_capacity(cells * d);
        for r in 0..cells {
            patches.extend(project(inputs.row(r), &self.projection));
        }
        let patches = Tensor::from_vec(vec![cells, d], patches)?;
        Ok(ImageFeatures {
            pooled: row_mean(&patches),
            patches,
            inputs: Some(inputs),
        })
    }

    /// Token features of a caption: row `i` is the table row of token `i`.
    pub fn encode_query(&self, query: &Query) -> Result<QueryFeatures> {
        self.encode_tokens(&query.tokens)
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Result<QueryFeatures> {
        if tokens.is_empty() || tokens.len() > self.config.max_tokens {
            return Err(CoreError::Contract(format!(
                "caption has {} tokens, budget is 1..={}",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        let ids = tokens
            .iter()
            .map(|t| self.token_id(t))
            .collect::<Result<Vec<_>>>()?;
        let d = self.config.d_model;
        let mut rows = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            rows.extend_from_slice(self.token_table.row(i));
        }
        let tokens = Tensor::from_vec(vec![ids.len(), d], rows)?;
        Ok(QueryFeatures {
            pooled: row_mean(&tokens),
            tokens,
            token_ids: Some(ids),
        })
    }

    pub fn bundle(&self, id: &str, scene: &Scene, noise_seed: u64, query: &Query) -> Result<FeatureBundle> {
        Ok(FeatureBundle {
            id: id.to_string(),
            image: self.encode_scene(scene, noise_seed)?,
            query: self.encode_query(query)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Placement;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn noiseless() -> SyntheticBackbone {
        SyntheticBackbone::new(
            BackboneConfig {
                noise_sigma: 0.0,
                ..BackboneConfig::default()
            },
            Vocabulary::default(),
        )
        .unwrap()
    }

    fn two_object_scene(a: &str, b: &str) -> Scene {
        Scene {
            scene_id: "x".into(),
            grid: 4,
            placements: vec![
                Placement {
                    cell: 0,
                    object: "cube".into(),
                    attributes: s(&[a]),
                },
                Placement {
                    cell: 1,
                    object: "sphere".into(),
                    attributes: s(&[b]),
                },
            ],
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let bb = SyntheticBackbone::new(BackboneConfig::default(), Vocabulary::default()).unwrap();
        let sc = two_object_scene("red", "blue");
        let a = bb.encode_scene(&sc, 5).unwrap();
        let b = bb.encode_scene(&sc, 5).unwrap();
        assert_eq!(a, b);
        let c = bb.encode_scene(&sc, 6).unwrap();
        assert_ne!(a.patches, c.patches);
    }

    #[test]
    fn swap_preserves_pooled_image_exactly() {
        let bb = noiseless();
        let i = bb.encode_scene(&two_object_scene("red", "blue"), 0).unwrap();
        let j = bb.encode_scene(&two_object_scene("blue", "red"), 0).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&i.pooled), bits(&j.pooled));
    }

    #[test]
    fn swap_changes_patch_rows() {
        let bb = noiseless();
        let i = bb.encode_scene(&two_object_scene("red", "blue"), 0).unwrap();
        let j = bb.encode_scene(&two_object_scene("blue", "red"), 0).unwrap();
        let max_row_diff = (0..16)
            .map(|r| {
                i.patches
                    .row(r)
                    .iter()
                    .zip(j.patches.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        assert!(max_row_diff > 0.1, "{max_row_diff}");
    }

    #[test]
    fn query_rows_are_table_lookups() {
        let bb = noiseless();
        let v = Vocabulary::default();
        let red = bb.encode_query(&Query::single(&v, "cube", &s(&["red"])).unwrap()).unwrap();
        let blue = bb.encode_query(&Query::single(&v, "cube", &s(&["blue"])).unwrap()).unwrap();
        assert_ne!(red.tokens.row(0), blue.tokens.row(0));
        assert_eq!(red.tokens.row(1), blue.tokens.row(1));
        let rep = bb.encode_tokens(&s(&["cube", "cube"])).unwrap();
        assert_eq!(rep.tokens.row(0), rep.tokens.row(1));
    }

    #[test]
    fn pooled_text_ignores_token_order() {
        let bb = noiseless();
        let a = bb.encode_tokens(&s(&["red", "cube", "and", "blue", "sphere"])).unwrap();
        let b = bb.encode_tokens(&s(&["blue", "cube", "and", "red", "sphere"])).unwrap();
        assert_eq!(a.pooled, b.pooled);
    }

    #[test]
    fn unknown_names_are_vocabulary_errors() {
        let bb = noiseless();
        assert!(matches!(bb.encode_tokens(&s(&["dragon"])), Err(CoreError::Vocabulary(_))));
        let mut sc = two_object_scene("red", "blue");
        sc.placements[0].object = "dragon".into();
        assert!(matches!(bb.encode_scene(&sc, 0), Err(CoreError::Vocabulary(_))));
    }

    #[test]
    fn tables_are_unit_rows() {
        let bb = noiseless();
        for t in [bb.object_table(), bb.attribute_table(), bb.token_table()] {
            let (r, _) = t.dims2().unwrap();
            for i in 0..r {
                let n: f64 = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-4, "{n}");
            }
        }
    }
}
