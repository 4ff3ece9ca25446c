use crate::{BoundParams, Graph, Result, Segment, TensorError, Var};

/// Projection weights of one attention block, as recorded graph handles.
/// Matrices are `d×d` and applied as `x·W + b`. Keys carry no bias: it would
/// shift each softmax row by a constant and so never receive gradient.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionWeights {
    /// Looks up `{prefix}.wq`, `{prefix}.bq`, ... in a bound parameter set.
    pub fn from_bound(bound: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(AttentionWeights {
            wq: bound.get(&format!("{prefix}.wq"))?,
            bq: bound.get(&format!("{prefix}.bq"))?,
            wk: bound.get(&format!("{prefix}.wk"))?,
            wv: bound.get(&format!("{prefix}.wv"))?,
            bv: bound.get(&format!("{prefix}.bv"))?,
            wo: bound.get(&format!("{prefix}.wo"))?,
            bo: bound.get(&format!("{prefix}.bo"))?,
        })
    }

    /// Parameter names and shapes for a block of width `d`.
    pub fn shapes(prefix: &str, d: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::with_capacity(7);
        for p in ["q", "k", "v", "o"] {
            out.push((format!("{prefix}.w{p}"), vec![d, d]));
            if p != "k" {
                out.push((format!("{prefix}.b{p}"), vec![d]));
            }
        }
        out
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Scaled dot-product attention with `heads` heads.
///
/// `queries` is `q×d`, `keys` and `values` are `k×d`; the output is `q×d`.
/// Each head sees a contiguous `d/heads` slice of the projected features and
/// its logits are divided by `sqrt(d/heads)`.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Var> {
    let nq = match g.shape(queries) {
        [r, _] => *r,
        other => return Err(TensorError::shape("attention", other, &[0, 0])),
    };
    let nk = g.shape(keys)[0];
    segmented_multi_head_attention(
        g,
        queries,
        keys,
        values,
        &[Segment::new(0, nq)],
        &[Segment::new(0, nk)],
        w,
        heads,
    )
}

/// [`multi_head_attention`] over stacked sequences: the rows of
/// `q_segs[s]` attend only to the rows of `k_segs[s]`. Projections are shared
/// and applied to the whole stack at once.
#[allow(clippy::too_many_arguments)]
pub fn segmented_multi_head_attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    q_segs: &[Segment],
    k_segs: &[Segment],
    w: &AttentionWeights,
    heads: usize,
) -> Result<Var> {
    let d = match g.shape(queries) {
        [_, d] => *d,
        other => return Err(TensorError::shape("attention", other, &[0, 0])),
    };
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    if g.shape(keys) != g.shape(values) || g.shape(keys).get(1) != Some(&d) {
        return Err(TensorError::shape("attention", g.shape(keys), g.shape(values)));
    }
    let q = affine(g, queries, w.wq, w.bq)?;
    let k = g.matmul(keys, w.wk)?;
    let v = affine(g, values, w.wv, w.bv)?;
    let mixed = g.segment_attention(q, k, v, q_segs, k_segs, heads)?;
    affine(g, mixed, w.wo, w.bo)
}
