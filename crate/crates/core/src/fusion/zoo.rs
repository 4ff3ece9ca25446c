//! Alternative fusion wirings: single-stream (FLAVA-like), text-to-image
//! cross-attention (ALBEF-like), and two-tower bidirectional cross-attention
//! (FIBER-like, with or without a joint self-attention stage first).

use bindlab_tensor::{BoundParams, Graph, ParameterSet, Segment, Var};

use super::blocks::{
    affine, assemble, cosine_pairs, cosine_to_tokens, cross_block, encoder_stack, fusion_block, leading_rows, pick,
    pool, Init, PairBatch, Piece, Stack,
};
use super::joint::positioned_inputs;
use super::{FusionConfig, FusionStrategy, HeadMode, Variant};
use crate::backbone::SyntheticBackbone;
use crate::Result;

pub struct FlavaStyle;
pub struct AlbefStyle;
pub struct FiberStyle;
pub struct FiberMm;

fn base(cfg: &FusionConfig, backbone: &SyntheticBackbone) -> Result<Init> {
    let mut init = Init::new(cfg.seed, cfg.d_model);
    if cfg.positional {
        init.positions(&super::dims_of(backbone))?;
    }
    Ok(init)
}

/// Averages each pair's `count` CLS rows, taken from the start of its segment.
fn cls_mean(g: &mut Graph, x: Var, segs: &[Segment], count: usize) -> Result<Var> {
    let rows = pick(g, x, &leading_rows(segs, count))?;
    let grouped = bindlab_tensor::segments_from_lengths(&vec![count; segs.len()]);
    pool(g, rows, &grouped)
}

/// Single-CLS head: affine, or mean cosine to the frozen query tokens.
fn single_head(
    cfg: &FusionConfig,
    g: &mut Graph,
    bound: &BoundParams,
    out: Var,
    frozen: &Stack,
    batch: &PairBatch,
) -> Result<Var> {
    match cfg.head_mode() {
        HeadMode::Pred => affine(g, bound, "head", out),
        HeadMode::Adapter => cosine_to_tokens(g, out, frozen, batch.pairs),
    }
}

/// Two-CLS head: cosine between them, or affine on their concatenation.
fn dual_head(cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, img: Var, txt: Var) -> Result<Var> {
    match cfg.head_mode() {
        HeadMode::Adapter => cosine_pairs(g, img, txt),
        HeadMode::Pred => {
            let both = g.concat_cols(&[img, txt])?;
            affine(g, bound, "head", both)
        }
    }
}

impl FusionStrategy for FlavaStyle {
    fn variant(&self) -> Variant {
        Variant::FlavaStyle
    }

    fn init(&self, cfg: &FusionConfig, backbone: &SyntheticBackbone) -> Result<ParameterSet> {
        let mut init = base(cfg, backbone)?;
        init.cls("cls", cfg.cls_count)?;
        init.encoder_stack("enc", cfg.encoder_layers)?;
        if cfg.head_mode() == HeadMode::Pred {
            init.head(cfg.d_model)?;
        }
        Ok(init.finish())
    }

    fn score_pairs(&self, cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, batch: &PairBatch) -> Result<Var> {
        let (patches, tokens, frozen) = positioned_inputs(cfg, g, bound, batch)?;
        let cls = bound.get("cls")?;
        let m = assemble(
            g,
            &[Piece::Shared(cls, cfg.cls_count), Piece::Image(&patches), Piece::Query(&tokens)],
            batch.pairs,
        )?;
        let a = encoder_stack(g, bound, "enc", cfg.encoder_layers, m.rows, &m.segs, cfg.heads)?;
        let out = cls_mean(g, a, &m.segs, cfg.cls_count)?;
        single_head(cfg, g, bound, out, &frozen, batch)
    }
}

impl FusionStrategy for AlbefStyle {
    fn variant(&self) -> Variant {
        Variant::AlbefStyle
    }

    fn init(&self, cfg: &FusionConfig, backbone: &SyntheticBackbone) -> Result<ParameterSet> {
        let mut init = base(cfg, backbone)?;
        init.cls("cls", cfg.cls_count)?;
        init.encoder_stack("img", cfg.encoder_layers)?;
        init.encoder_stack("txt", cfg.encoder_layers)?;
        init.fusion_block("fuse")?;
        if cfg.head_mode() == HeadMode::Pred {
            init.head(cfg.d_model)?;
        }
        Ok(init.finish())
    }

    fn score_pairs(&self, cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, batch: &PairBatch) -> Result<Var> {
        let (patches, tokens, frozen) = positioned_inputs(cfg, g, bound, batch)?;
        let img = encoder_stack(g, bound, "img", cfg.encoder_layers, patches.rows, &patches.segs, cfg.heads)?;
        let txt = encoder_stack(g, bound, "txt", cfg.encoder_layers, tokens.rows, &tokens.segs, cfg.heads)?;
        let txt = Stack {
            rows: txt,
            segs: tokens.segs.clone(),
        };
        let cls = bound.get("cls")?;
        let q = assemble(g, &[Piece::Shared(cls, cfg.cls_count), Piece::Query(&txt)], batch.pairs)?;
        let mem_segs: Vec<Segment> = batch.pairs.iter().map(|&(i, _)| patches.segs[i]).collect();
        let fused = fusion_block(g, bound, "fuse", (q.rows, &q.segs), (img, &mem_segs), cfg.heads)?;
        let out = cls_mean(g, fused, &q.segs, cfg.cls_count)?;
        single_head(cfg, g, bound, out, &frozen, batch)
    }
}

fn fiber_params(cfg: &FusionConfig, backbone: &SyntheticBackbone, joint: bool) -> Result<ParameterSet> {
    let mut init = base(cfg, backbone)?;
    init.cls("cls.img", cfg.cls_count)?;
    init.cls("cls.txt", cfg.cls_count)?;
    if joint {
        init.encoder_stack("enc", cfg.encoder_layers)?;
    } else {
        init.encoder_stack("img", cfg.encoder_layers)?;
        init.encoder_stack("txt", cfg.encoder_layers)?;
    }
    init.cross_block("cross.img")?;
    init.cross_block("cross.txt")?;
    if cfg.head_mode() == HeadMode::Pred {
        init.head(2 * cfg.d_model)?;
    }
    Ok(init.finish())
}

/// Each side's CLS rows cross-attend to the other side; returns the two
/// pooled CLS outputs per pair.
#[allow(clippy::too_many_arguments)]
fn bidirectional(
    cfg: &FusionConfig,
    g: &mut Graph,
    bound: &BoundParams,
    img: Var,
    img_segs: &[Segment],
    txt: Var,
    txt_segs: &[Segment],
) -> Result<(Var, Var)> {
    let c = cfg.cls_count;
    let grouped = bindlab_tensor::segments_from_lengths(&vec![c; img_segs.len()]);
    let img_cls = pick(g, img, &leading_rows(img_segs, c))?;
    let txt_cls = pick(g, txt, &leading_rows(txt_segs, c))?;
    let a = cross_block(g, bound, "cross.img", (img_cls, &grouped), (txt, txt_segs), cfg.heads)?;
    let b = cross_block(g, bound, "cross.txt", (txt_cls, &grouped), (img, img_segs), cfg.heads)?;
    Ok((pool(g, a, &grouped)?, pool(g, b, &grouped)?))
}

impl FusionStrategy for FiberStyle {
    fn variant(&self) -> Variant {
        Variant::FiberStyle
    }

    fn init(&self, cfg: &FusionConfig, backbone: &SyntheticBackbone) -> Result<ParameterSet> {
        fiber_params(cfg, backbone, false)
    }

    fn score_pairs(&self, cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, batch: &PairBatch) -> Result<Var> {
        let (patches, tokens, _) = positioned_inputs(cfg, g, bound, batch)?;
        let c = cfg.cls_count;
        let per_image: Vec<(usize, usize)> = (0..batch.images.len()).map(|i| (i, 0)).collect();
        let per_query: Vec<(usize, usize)> = (0..batch.queries.len()).map(|j| (0, j)).collect();
        let img = assemble(g, &[Piece::Shared(bound.get("cls.img")?, c), Piece::Image(&patches)], &per_image)?;
        let txt = assemble(g, &[Piece::Shared(bound.get("cls.txt")?, c), Piece::Query(&tokens)], &per_query)?;
        let ie = encoder_stack(g, bound, "img", cfg.encoder_layers, img.rows, &img.segs, cfg.heads)?;
        let te = encoder_stack(g, bound, "txt", cfg.encoder_layers, txt.rows, &txt.segs, cfg.heads)?;
        let img_segs: Vec<Segment> = batch.pairs.iter().map(|&(i, _)| img.segs[i]).collect();
        let txt_segs: Vec<Segment> = batch.pairs.iter().map(|&(_, j)| txt.segs[j]).collect();
        let (a, b) = bidirectional(cfg, g, bound, ie, &img_segs, te, &txt_segs)?;
        dual_head(cfg, g, bound, a, b)
    }
}

impl FusionStrategy for FiberMm {
    fn variant(&self) -> Variant {
        Variant::FiberMm
    }

    fn init(&self, cfg: &FusionConfig, backbone: &SyntheticBackbone) -> Result<ParameterSet> {
        fiber_params(cfg, backbone, true)
    }

    fn score_pairs(&self, cfg: &FusionConfig, g: &mut Graph, bound: &BoundParams, batch: &PairBatch) -> Result<Var> {
        let (patches, tokens, _) = positioned_inputs(cfg, g, bound, batch)?;
        let c = cfg.cls_count;
        let m = assemble(
            g,
            &[
                Piece::Shared(bound.get("cls.img")?, c),
                Piece::Image(&patches),
                Piece::Shared(bound.get("cls.txt")?, c),
                Piece::Query(&tokens),
            ],
            batch.pairs,
        )?;
        let a = encoder_stack(g, bound, "enc", cfg.encoder_layers, m.rows, &m.segs, cfg.heads)?;
        let join = |x: &Segment, y: &Segment| Segment::new(x.start, x.len + y.len);
        let img_segs: Vec<Segment> = m.parts[0].iter().zip(&m.parts[1]).map(|(x, y)| join(x, y)).collect();
        let txt_segs: Vec<Segment> = m.parts[2].iter().zip(&m.parts[3]).map(|(x, y)| join(x, y)).collect();
        let (u, v) = bidirectional(cfg, g, bound, a, &img_segs, a, &txt_segs)?;
        dual_head(cfg, g, bound, u, v)
    }
}
