//! Scorers that encode image and text separately and compare them by cosine.

use bindlab_tensor::{BoundParams, Graph, ParameterSet, Tensor, Var};

use super::blocks::{
    embed, position_tables, affine, cosine_pairs, encoder_stack, image_stack, pick, token_stack, Init, PairBatch, Stack,
};
use super::{FusionConfig, FusionStrategy, Variant};
use crate::backbone::SyntheticBackbone;
use crate::{CoreError, Result};

fn pooled_images(g: &mut Graph, batch: &PairBatch) -> Result<Var> {
    let d = batch.images[0].pooled.len();
    let values: Vec<f64> = batch.images.iter().flat_map(|i| i.pooled.iter().copied()).collect();
    Ok(g.constant(Tensor::from_vec(vec![batch.images.len(), d], values)?))
}

fn pooled_queries(g: &mut Graph, batch: &PairBatch) -> Result<Var> {
    let d = batch.queries[0].pooled.len();
    let values: Vec<f64> = batch.queries.iter().flat_map(|q| q.pooled.iter().copied()).collect();
    Ok(g.constant(Tensor::from_vec(vec![batch.queries.len(), d], values)?))
}

/// Cosine between per-image and per-query embeddings for every pair.
fn pairwise_cosine(g: &mut Graph, images: Var, queries: Var, batch: &PairBatch) -> Result<Var> {
    let (ii, jj): (Vec<usize>, Vec<usize>) = batch.pairs.iter().copied().unzip();
    let a = pick(g, images, &ii)?;
    let b = pick(g, queries, &jj)?;
    cosine_pairs(g, a, b)
}

/// Affine maps on both pooled vectors.
pub struct Linear;

impl FusionStrategy for Linear {
    fn variant(&self) -> Variant {
        Variant::Linear
    }

    fn init(&self, cfg: &FusionConfig, _backbone: &SyntheticBackbone) -> Result<ParameterSet> {
        let d = cfg.d_model;
        let mut init = Init::new(cfg.seed, d);
        for side in ["img", "txt"] {
            init.tensor(&format!("{side}.w"), Tensor::identity(d))?;
            init.zeros(&format!("{side}.b"), &[d])?;
        }
        Ok(init.finish())
    }

    fn score_pairs(&self, _cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, batch: &PairBatch) -> Result<Var> {
        let img = pooled_images(g, batch)?;
        let txt = pooled_queries(g, batch)?;
        let u = affine(g, bound, "img", img)?;
        let v = affine(g, bound, "txt", txt)?;
        pairwise_cosine(g, u, v, batch)
    }
}

/// Learns a copy of the token table; the image side stays frozen.
pub struct PromptTune;

impl FusionStrategy for PromptTune {
    fn variant(&self) -> Variant {
        Variant::PromptTune
    }

    fn init(&self, cfg: &FusionConfig, backbone: &SyntheticBackbone) -> Result<ParameterSet> {
        let mut init = Init::new(cfg.seed, cfg.d_model);
        init.tensor("tokens", backbone.token_table().clone())?;
        Ok(init.finish())
    }

    fn score_pairs(&self, _cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, batch: &PairBatch) -> Result<Var> {
        let table = bound.get("tokens")?;
        let mut ids = Vec::new();
        let mut lens = Vec::with_capacity(batch.queries.len());
        for q in batch.queries {
            let t = q.token_ids.as_ref().ok_or_else(|| {
                CoreError::Contract("prompt tuning needs token ids; external features carry none".into())
            })?;
            ids.extend_from_slice(t);
            lens.push(t.len());
        }
        let rows = g.gather_rows(table, &ids)?;
        let txt = g.segment_mean(rows, &bindlab_tensor::segments_from_lengths(&lens))?;
        let img = pooled_images(g, batch)?;
        pairwise_cosine(g, img, txt, batch)
    }
}

/// Separate self-attention stacks over patches and tokens, mean-pooled.
pub struct FtLate;

/// FT-late with the backbone projection also trainable.
pub struct FtAllAnalog;

fn late_params(cfg: &FusionConfig, backbone: &SyntheticBackbone, with_projection: bool) -> Result<ParameterSet> {
    let mut init = Init::new(cfg.seed, cfg.d_model);
    init.encoder_stack("img", cfg.encoder_layers)?;
    init.encoder_stack("txt", cfg.encoder_layers)?;
    if cfg.positional {
        init.positions(&super::dims_of(backbone))?;
    }
    if with_projection {
        init.tensor("proj", backbone.projection().clone())?;
    }
    Ok(init.finish())
}

fn late_score(cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, batch: &PairBatch, patches: Stack) -> Result<Var> {
    let tokens = token_stack(g, batch.queries)?;
    let (pi, pt) = position_tables(cfg, bound)?;
    let x = embed(g, &patches, pi)?;
    let y = embed(g, &tokens, pt)?;
    let x = encoder_stack(g, bound, "img", cfg.encoder_layers, x, &patches.segs, cfg.heads)?;
    let y = encoder_stack(g, bound, "txt", cfg.encoder_layers, y, &tokens.segs, cfg.heads)?;
    let u = g.segment_mean(x, &patches.segs)?;
    let v = g.segment_mean(y, &tokens.segs)?;
    pairwise_cosine(g, u, v, batch)
}

impl FusionStrategy for FtLate {
    fn variant(&self) -> Variant {
        Variant::FtLate
    }

    fn init(&self, cfg: &FusionConfig, backbone: &SyntheticBackbone) -> Result<ParameterSet> {
        late_params(cfg, backbone, false)
    }

    fn score_pairs(&self, cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, batch: &PairBatch) -> Result<Var> {
        let patches = image_stack(g, batch.images)?;
        late_score(cfg, g, bound, batch, patches)
    }
}

impl FusionStrategy for FtAllAnalog {
    fn variant(&self) -> Variant {
        Variant::FtAllAnalog
    }

    fn init(&self, cfg: &FusionConfig, backbone: &SyntheticBackbone) -> Result<ParameterSet> {
        late_params(cfg, backbone, true)
    }

    fn score_pairs(&self, cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, batch: &PairBatch) -> Result<Var> {
        let mut values = Vec::new();
        let mut lens = Vec::with_capacity(batch.images.len());
        for img in batch.images {
            let inputs = img.inputs.as_ref().ok_or_else(|| {
                CoreError::Contract("the FT-all analog needs pre-projection inputs".into())
            })?;
            values.extend_from_slice(inputs.values());
            lens.push(inputs.shape()[0]);
        }
        let d = cfg.d_model;
        let raw = g.constant(Tensor::from_vec(vec![values.len() / d, d], values)?);
        let rows = g.matmul(raw, bound.get("proj")?)?;
        let patches = Stack {
            rows,
            segs: bindlab_tensor::segments_from_lengths(&lens),
        };
        late_score(cfg, g, bound, batch, patches)
    }
}
