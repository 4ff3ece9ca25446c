//! Shared building blocks: parameter initialisation, pre-norm transformer
//! blocks over segmented stacks, and assembly of per-pair input sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bindlab_tensor::{
    segmented_multi_head_attention, AttentionWeights, BoundParams, Graph, ParameterSet, Segment, Tensor, Var,
};

use crate::backbone::{ImageFeatures, QueryFeatures};
use crate::{CoreError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const FFN_EXPANSION: usize = 4;
const POSITION_STD: f64 = 0.5;

/// Sizes a model needs from the backbone that feeds it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub d_model: usize,
    pub patches: usize,
    pub max_tokens: usize,
}

/// Seeded parameter construction in a fixed call order.
pub(crate) struct Init {
    pub set: ParameterSet,
    rng: ChaCha8Rng,
    d: usize,
}

impl Init {
    pub fn new(seed: u64, d: usize) -> Self {
        Init {
            set: ParameterSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            d,
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = Tensor::randn(shape, std, &mut self.rng);
        Ok(self.set.insert(name, t)?)
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> Result<()> {
        Ok(self.set.insert(name, t)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.tensor(name, Tensor::zeros(shape))
    }

    /// `x·W + b` map from `fan_in` to `fan_out`.
    pub fn affine(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.normal(&format!("{prefix}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())?;
        self.zeros(&format!("{prefix}.b"), &[fan_out])
    }

    fn layer_norm(&mut self, prefix: &str) -> Result<()> {
        self.tensor(&format!("{prefix}.g"), Tensor::filled(&[self.d], 1.0))?;
        self.zeros(&format!("{prefix}.b"), &[self.d])
    }

    fn attention(&mut self, prefix: &str) -> Result<()> {
        let std = 1.0 / (self.d as f64).sqrt();
        for (name, shape) in AttentionWeights::shapes(prefix, self.d) {
            if shape.len() == 2 {
                self.normal(&name, &shape, std)?;
            } else {
                self.zeros(&name, &shape)?;
            }
        }
        Ok(())
    }

    fn ffn(&mut self, prefix: &str) -> Result<()> {
        let h = self.d * FFN_EXPANSION;
        self.affine(&format!("{prefix}.ff1"), self.d, h)?;
        self.affine(&format!("{prefix}.ff2"), h, self.d)
    }

    /// Scalar prediction head `head.w` `[fan_in × 1]`, `head.b`, zero at
    /// start so initial logits are 0 whatever the fused features' scale.
    pub fn head(&mut self, fan_in: usize) -> Result<()> {
        self.zeros("head.w", &[fan_in, 1])?;
        self.zeros("head.b", &[1])
    }

    /// Self-attention block: `ln1`, `att`, `ln2`, feed-forward.
    pub fn encoder_block(&mut self, prefix: &str) -> Result<()> {
        self.layer_norm(&format!("{prefix}.ln1"))?;
        self.attention(&format!("{prefix}.att"))?;
        self.layer_norm(&format!("{prefix}.ln2"))?;
        self.ffn(prefix)
    }

    pub fn encoder_stack(&mut self, prefix: &str, layers: usize) -> Result<()> {
        (0..layers).try_for_each(|l| self.encoder_block(&format!("{prefix}.l{l}")))
    }

    /// Cross-attention block: `lnq`, `lnm` (memory), `att`, `ln2`, feed-forward.
    pub fn cross_block(&mut self, prefix: &str) -> Result<()> {
        self.layer_norm(&format!("{prefix}.lnq"))?;
        self.layer_norm(&format!("{prefix}.lnm"))?;
        self.attention(&format!("{prefix}.att"))?;
        self.layer_norm(&format!("{prefix}.ln2"))?;
        self.ffn(prefix)
    }

    /// Block with self-attention, then cross-attention into a memory, then
    /// feed-forward.
    pub fn fusion_block(&mut self, prefix: &str) -> Result<()> {
        self.layer_norm(&format!("{prefix}.ln1"))?;
        self.attention(&format!("{prefix}.self"))?;
        self.cross_block(prefix)
    }

    pub fn cls(&mut self, name: &str, count: usize) -> Result<()> {
        self.normal(name, &[count, self.d], 1.0 / (self.d as f64).sqrt())
    }

    pub fn positions(&mut self, dims: &ModelDims) -> Result<()> {
        self.normal("pos.image", &[dims.patches, self.d], POSITION_STD)?;
        self.normal("pos.text", &[dims.max_tokens, self.d], POSITION_STD)
    }

    pub fn finish(self) -> ParameterSet {
        self.set
    }
}

fn p(bound: &BoundParams, name: String) -> Result<Var> {
    Ok(bound.get(&name)?)
}

pub(crate) fn layer_norm(g: &mut Graph, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let gain = p(bound, format!("{prefix}.g"))?;
    let bias = p(bound, format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
}

pub(crate) fn affine(g: &mut Graph, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p(bound, format!("{prefix}.w"))?;
    let b = p(bound, format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

fn ffn_residual(g: &mut Graph, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = layer_norm(g, bound, &format!("{prefix}.ln2"), x)?;
    let h = affine(g, bound, &format!("{prefix}.ff1"), h)?;
    let h = g.gelu(h);
    let h = affine(g, bound, &format!("{prefix}.ff2"), h)?;
    Ok(g.add(x, h)?)
}

fn attend(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    (q, q_segs): (Var, &[Segment]),
    (m, m_segs): (Var, &[Segment]),
    heads: usize,
) -> Result<Var> {
    let w = AttentionWeights::from_bound(bound, prefix)?;
    Ok(segmented_multi_head_attention(g, q, m, m, q_segs, m_segs, &w, heads)?)
}

/// Pre-norm self-attention block applied to every segment independently.
pub(crate) fn encoder_block(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    segs: &[Segment],
    heads: usize,
) -> Result<Var> {
    let h = layer_norm(g, bound, &format!("{prefix}.ln1"), x)?;
    let a = attend(g, bound, &format!("{prefix}.att"), (h, segs), (h, segs), heads)?;
    let x = g.add(x, a)?;
    ffn_residual(g, bound, prefix, x)
}

pub(crate) fn encoder_stack(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    layers: usize,
    mut x: Var,
    segs: &[Segment],
    heads: usize,
) -> Result<Var> {
    for l in 0..layers {
        x = encoder_block(g, bound, &format!("{prefix}.l{l}"), x, segs, heads)?;
    }
    Ok(x)
}

/// Pre-norm cross-attention block: rows of `q_segs[s]` attend to the memory
/// rows of `m_segs[s]`.
pub(crate) fn cross_block(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    (x, q_segs): (Var, &[Segment]),
    (mem, m_segs): (Var, &[Segment]),
    heads: usize,
) -> Result<Var> {
    let hq = layer_norm(g, bound, &format!("{prefix}.lnq"), x)?;
    let hm = layer_norm(g, bound, &format!("{prefix}.lnm"), mem)?;
    let a = attend(g, bound, &format!("{prefix}.att"), (hq, q_segs), (hm, m_segs), heads)?;
    let x = g.add(x, a)?;
    ffn_residual(g, bound, prefix, x)
}

/// Self-attention within the query segments, cross-attention into the
/// memory, then feed-forward.
pub(crate) fn fusion_block(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    (x, q_segs): (Var, &[Segment]),
    (mem, m_segs): (Var, &[Segment]),
    heads: usize,
) -> Result<Var> {
    let h = layer_norm(g, bound, &format!("{prefix}.ln1"), x)?;
    let a = attend(g, bound, &format!("{prefix}.self"), (h, q_segs), (h, q_segs), heads)?;
    let x = g.add(x, a)?;
    cross_block(g, bound, prefix, (x, q_segs), (mem, m_segs), heads)
}

/// Images, queries and the `(image, query)` index pairs to score.
#[derive(Clone, Copy, Debug)]
pub struct PairBatch<'a> {
    pub images: &'a [&'a ImageFeatures],
    pub queries: &'a [&'a QueryFeatures],
    pub pairs: &'a [(usize, usize)],
}

impl<'a> PairBatch<'a> {
    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        if self.images.is_empty() || self.queries.is_empty() || self.pairs.is_empty() {
            return Err(CoreError::Contract("scoring needs at least one image, query and pair".into()));
        }
        for img in self.images {
            let (p, d) = img.patches.dims2()?;
            if p != dims.patches || d != dims.d_model {
                return Err(CoreError::Contract(format!(
                    "image features are {p}×{d}, model expects {}×{}",
                    dims.patches, dims.d_model
                )));
            }
        }
        for q in self.queries {
            let (n, d) = q.tokens.dims2()?;
            if n > dims.max_tokens || d != dims.d_model {
                return Err(CoreError::Contract(format!(
                    "query features are {n}×{d}, model expects at most {}×{}",
                    dims.max_tokens, dims.d_model
                )));
            }
        }
        for &(i, j) in self.pairs {
            if i >= self.images.len() || j >= self.queries.len() {
                return Err(CoreError::Contract(format!("pair ({i}, {j}) out of range")));
            }
        }
        Ok(())
    }
}

/// Rows of stacked matrices plus the segment of each item.
#[derive(Clone, Debug)]
pub(crate) struct Stack {
    pub rows: Var,
    pub segs: Vec<Segment>,
}

fn lengths_to_segments(lengths: impl Iterator<Item = usize>) -> Vec<Segment> {
    let lengths: Vec<usize> = lengths.collect();
    bindlab_tensor::segments_from_lengths(&lengths)
}

/// All image patch matrices stacked as a constant.
pub(crate) fn image_stack(g: &mut Graph, images: &[&ImageFeatures]) -> Result<Stack> {
    let mut values = Vec::new();
    for img in images {
        values.extend_from_slice(img.patches.values());
    }
    let d = images[0].patches.shape()[1];
    let segs = lengths_to_segments(images.iter().map(|i| i.patches.shape()[0]));
    let rows = g.constant(Tensor::from_vec(vec![values.len() / d, d], values)?);
    Ok(Stack { rows, segs })
}

/// All token matrices stacked as a constant.
pub(crate) fn token_stack(g: &mut Graph, queries: &[&QueryFeatures]) -> Result<Stack> {
    let mut values = Vec::new();
    for q in queries {
        values.extend_from_slice(q.tokens.values());
    }
    let d = queries[0].tokens.shape()[1];
    let segs = lengths_to_segments(queries.iter().map(|q| q.tokens.shape()[0]));
    let rows = g.constant(Tensor::from_vec(vec![values.len() / d, d], values)?);
    Ok(Stack { rows, segs })
}

/// Transformer input for a stack: rows scaled by `√d` so elements have
/// roughly unit variance like the block outputs they are summed with, plus
/// row `k` of the position table on the `k`-th row of every segment.
pub(crate) fn embed(g: &mut Graph, stack: &Stack, positions: Option<Var>) -> Result<Var> {
    let d = g.shape(stack.rows)[1];
    let x = g.scale(stack.rows, (d as f64).sqrt());
    let Some(table) = positions else {
        return Ok(x);
    };
    let idx: Vec<usize> = stack.segs.iter().flat_map(|s| 0..s.len).collect();
    let pos = g.gather_rows(table, &idx)?;
    Ok(g.add(x, pos)?)
}

/// The image and text position tables, when enabled.
pub(crate) fn position_tables(cfg: &super::FusionConfig, bound: &BoundParams) -> Result<(Option<Var>, Option<Var>)> {
    if !cfg.positional {
        return Ok((None, None));
    }
    Ok((Some(bound.get("pos.image")?), Some(bound.get("pos.text")?)))
}

/// One contiguous piece of a per-pair sequence.
pub(crate) enum Piece<'a> {
    /// The same `count` rows of a shared source for every pair (CLS tokens).
    Shared(Var, usize),
    /// The segment of the pair's image in an image stack.
    Image(&'a Stack),
    /// The segment of the pair's query in a token stack.
    Query(&'a Stack),
}

/// Per-pair sequences built by concatenating pieces, plus the row segment of
/// every piece for every pair (`parts[piece][pair]`).
pub(crate) struct Assembled {
    pub rows: Var,
    pub segs: Vec<Segment>,
    pub parts: Vec<Vec<Segment>>,
}

pub(crate) fn assemble(g: &mut Graph, pieces: &[Piece], pairs: &[(usize, usize)]) -> Result<Assembled> {
    let sources: Vec<Var> = pieces
        .iter()
        .map(|p| match p {
            Piece::Shared(v, _) => *v,
            Piece::Image(s) | Piece::Query(s) => s.rows,
        })
        .collect();
    let mut offsets = Vec::with_capacity(sources.len());
    let mut total = 0;
    for &s in &sources {
        offsets.push(total);
        total += g.shape(s)[0];
    }
    let all = if sources.len() == 1 { sources[0] } else { g.concat_rows(&sources)? };
    let mut idx = Vec::new();
    let mut segs = Vec::with_capacity(pairs.len());
    let mut parts = vec![Vec::with_capacity(pairs.len()); pieces.len()];
    for &(i, j) in pairs {
        let start = idx.len();
        for (k, piece) in pieces.iter().enumerate() {
            let (from, len) = match piece {
                Piece::Shared(_, n) => (0, *n),
                Piece::Image(s) => (s.segs[i].start, s.segs[i].len),
                Piece::Query(s) => (s.segs[j].start, s.segs[j].len),
            };
            parts[k].push(Segment::new(idx.len(), len));
            idx.extend((from..from + len).map(|r| offsets[k] + r));
        }
        segs.push(Segment::new(start, idx.len() - start));
    }
    let rows = g.gather_rows(all, &idx)?;
    Ok(Assembled { rows, segs, parts })
}

/// Mean over each segment's rows: `[n_pairs × d]`.
pub(crate) fn pool(g: &mut Graph, x: Var, segs: &[Segment]) -> Result<Var> {
    Ok(g.segment_mean(x, segs)?)
}

/// For every pair, the mean over the query's frozen tokens of
/// `cosine(out[pair], token)`: `[n_pairs × 1]`.
pub(crate) fn cosine_to_tokens(g: &mut Graph, out: Var, tokens: &Stack, pairs: &[(usize, usize)]) -> Result<Var> {
    let mut out_idx = Vec::new();
    let mut tok_idx = Vec::new();
    let mut lens = Vec::with_capacity(pairs.len());
    for (k, &(_, j)) in pairs.iter().enumerate() {
        let s = tokens.segs[j];
        out_idx.extend(std::iter::repeat_n(k, s.len));
        tok_idx.extend(s.start..s.end());
        lens.push(s.len);
    }
    let a = g.gather_rows(out, &out_idx)?;
    let b = g.gather_rows(tokens.rows, &tok_idx)?;
    let cos = g.cosine_rows(a, b)?;
    let n = g.shape(cos)[0];
    let cos = g.reshape(cos, vec![n, 1])?;
    Ok(g.segment_mean(cos, &bindlab_tensor::segments_from_lengths(&lens))?)
}

/// Row-wise cosine between two `[n × d]` matrices: `[n × 1]`.
pub(crate) fn cosine_pairs(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let c = g.cosine_rows(a, b)?;
    let n = g.shape(c)[0];
    Ok(g.reshape(c, vec![n, 1])?)
}

/// Repeats the rows of `x` so that row `k` of the result is `x[index[k]]`.
pub(crate) fn pick(g: &mut Graph, x: Var, index: &[usize]) -> Result<Var> {
    Ok(g.gather_rows(x, index)?)
}

/// Row indices of the first `count` rows of each segment.
pub(crate) fn leading_rows(segs: &[Segment], count: usize) -> Vec<usize> {
    segs.iter().flat_map(|s| s.start..s.start + count).collect()
}
