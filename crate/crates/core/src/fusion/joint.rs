//! MM-Adapter and MM-Pred: self-attention over the concatenated modalities,
//! then a CLS token cross-attends to the fused sequence.

use bindlab_tensor::{BoundParams, Graph, ParameterSet, Var};

use super::blocks::{
    embed, position_tables, affine, assemble, cosine_to_tokens, cross_block, encoder_stack, image_stack, pool, token_stack,
    Init, PairBatch, Piece, Stack,
};
use super::{FusionConfig, FusionStrategy, HeadMode, Variant};
use crate::backbone::SyntheticBackbone;
use crate::Result;

pub struct MmAdapter;
pub struct MmPred;

fn params(cfg: &FusionConfig, backbone: &SyntheticBackbone, head: HeadMode) -> Result<ParameterSet> {
    let mut init = Init::new(cfg.seed, cfg.d_model);
    init.cls("cls", cfg.cls_count)?;
    init.encoder_stack("enc", cfg.encoder_layers)?;
    init.cross_block("cross")?;
    if cfg.positional {
        init.positions(&super::dims_of(backbone))?;
    }
    if head == HeadMode::Pred {
        init.head(cfg.d_model)?;
    }
    Ok(init.finish())
}

/// Inputs with positional encodings (when enabled) for both modalities.
pub(crate) fn positioned_inputs(
    cfg: &FusionConfig,
    g: &mut Graph,
    bound: &BoundParams,
    batch: &PairBatch,
) -> Result<(Stack, Stack, Stack)> {
    let patches = image_stack(g, batch.images)?;
    let tokens = token_stack(g, batch.queries)?;
    let (pi, pt) = position_tables(cfg, bound)?;
    let x = embed(g, &patches, pi)?;
    let y = embed(g, &tokens, pt)?;
    Ok((
        Stack {
            rows: x,
            segs: patches.segs,
        },
        Stack {
            rows: y,
            segs: tokens.segs.clone(),
        },
        tokens,
    ))
}

/// Fused CLS output per pair, `[n_pairs × d]`, and the frozen token stack.
fn fused_cls(cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, batch: &PairBatch) -> Result<(Var, Stack)> {
    let (patches, tokens, frozen) = positioned_inputs(cfg, g, bound, batch)?;
    let m = assemble(g, &[Piece::Image(&patches), Piece::Query(&tokens)], batch.pairs)?;
    let a = encoder_stack(g, bound, "enc", cfg.encoder_layers, m.rows, &m.segs, cfg.heads)?;
    let cls = bound.get("cls")?;
    let q = assemble(g, &[Piece::Shared(cls, cfg.cls_count)], batch.pairs)?;
    let out = cross_block(g, bound, "cross", (q.rows, &q.segs), (a, &m.segs), cfg.heads)?;
    Ok((pool(g, out, &q.segs)?, frozen))
}

impl FusionStrategy for MmAdapter {
    fn variant(&self) -> Variant {
        Variant::MmAdapter
    }

    fn init(&self, cfg: &FusionConfig, backbone: &SyntheticBackbone) -> Result<ParameterSet> {
        params(cfg, backbone, HeadMode::Adapter)
    }

    fn score_pairs(&self, cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, batch: &PairBatch) -> Result<Var> {
        let (out, frozen) = fused_cls(cfg, g, bound, batch)?;
        cosine_to_tokens(g, out, &frozen, batch.pairs)
    }
}

impl FusionStrategy for MmPred {
    fn variant(&self) -> Variant {
        Variant::MmPred
    }

    fn init(&self, cfg: &FusionConfig, backbone: &SyntheticBackbone) -> Result<ParameterSet> {
        params(cfg, backbone, HeadMode::Pred)
    }

    fn score_pairs(&self, cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, batch: &PairBatch) -> Result<Var> {
        let (out, _) = fused_cls(cfg, g, bound, batch)?;
        affine(g, bound, "head", out)
    }
}
