//! Attention and pooling over stacked, independently segmented sequences.
//!
//! A batch of variable-length sequences is stored as one tall matrix; a
//! [`Segment`] names the rows of one sequence. Row-wise work (projections,
//! feed-forward layers, norms) then runs as a single large product, and only
//! the softmax mixing is done segment by segment.

use std::sync::Arc;

use crate::graph::Op;
use crate::tensor::gemm_strided;
use crate::{Graph, Result, TensorError, Var};

/// Rows `start..start + len` of a stacked matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Segment { start, len }
    }

    pub fn end(self) -> usize {
        self.start + self.len
    }
}

/// Consecutive segments with the given lengths, starting at row 0.
pub fn segments_from_lengths(lengths: &[usize]) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let s = Segment::new(start, len);
            start += len;
            s
        })
        .collect()
}

#[derive(Debug)]
pub(crate) struct AttentionTape {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub q_segs: Arc<Vec<Segment>>,
    pub k_segs: Arc<Vec<Segment>>,
    pub heads: usize,
    pub scale: f64,
    /// Softmax weights, one `lq×lk` block per (segment, head), in that order.
    pub probs: Vec<f64>,
}

fn check_segments(op: &'static str, segs: &[Segment], rows: usize) -> Result<()> {
    for s in segs {
        if s.len == 0 || s.end() > rows {
            return Err(TensorError::Contract(format!(
                "{op}: segment {}..{} is empty or exceeds {rows} rows",
                s.start,
                s.end()
            )));
        }
    }
    Ok(())
}

impl Graph {
    /// Multi-head scaled dot-product attention, applied independently to each
    /// segment pair: rows of `q_segs[s]` attend to rows of `k_segs[s]`.
    ///
    /// `q` is `Nq×d`, `k` and `v` are `Nk×d`; there are no projections. Head
    /// `h` uses columns `h·d/heads..(h+1)·d/heads` and logits are divided by
    /// `sqrt(d/heads)`. Rows of `q` outside every segment come out as zeros.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_segs: &[Segment],
        k_segs: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        let (nq, d) = self.dims2("segment_attention", q)?;
        let (nk, dk) = self.dims2("segment_attention", k)?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(TensorError::shape("segment_attention", self.shape(q), self.shape(v)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if q_segs.len() != k_segs.len() {
            return Err(TensorError::Contract(format!(
                "segment_attention: {} query segments but {} key segments",
                q_segs.len(),
                k_segs.len()
            )));
        }
        check_segments("segment_attention", q_segs, nq)?;
        check_segments("segment_attention", k_segs, nk)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.values(q), self.values(k), self.values(v));
        let mut out = vec![0.0; nq * d];
        let block_total: usize = q_segs.iter().zip(k_segs).map(|(a, b)| a.len * b.len).sum();
        let mut probs = vec![0.0; block_total * heads];
        let mut at = 0;
        let di = d as isize;
        for (qs, ks) in q_segs.iter().zip(k_segs) {
            let (lq, lk) = (qs.len, ks.len);
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[at..at + lq * lk];
                gemm_strided(
                    lq,
                    dh,
                    lk,
                    &qv[qs.start * d + off..],
                    (di, 1),
                    &kv[ks.start * d + off..],
                    (1, di),
                    p,
                    (lk as isize, 1),
                    false,
                );
                for row in p.chunks_mut(lk) {
                    let mut max = f64::NEG_INFINITY;
                    for x in row.iter_mut() {
                        *x *= scale;
                        max = max.max(*x);
                    }
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= sum);
                }
                gemm_strided(
                    lq,
                    lk,
                    dh,
                    p,
                    (lk as isize, 1),
                    &vv[ks.start * d + off..],
                    (di, 1),
                    &mut out[qs.start * d + off..],
                    (di, 1),
                    true,
                );
                at += lq * lk;
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let t = self.make(vec![nq, d], out);
        Ok(self.push(
            t,
            Op::SegmentAttention(Box::new(AttentionTape {
                q,
                k,
                v,
                q_segs: Arc::new(q_segs.to_vec()),
                k_segs: Arc::new(k_segs.to_vec()),
                heads,
                scale,
                probs,
            })),
            needs,
        ))
    }

    /// Mean of the rows of each segment: `[rows×c]` to `[segments×c]`.
    pub fn segment_mean(&mut self, x: Var, segs: &[Segment]) -> Result<Var> {
        let (r, c) = self.dims2("segment_mean", x)?;
        check_segments("segment_mean", segs, r)?;
        if segs.is_empty() {
            return Err(TensorError::Contract("segment_mean: no segments".into()));
        }
        let xv = self.values(x);
        let mut out = vec![0.0; segs.len() * c];
        for (s, seg) in segs.iter().enumerate() {
            let dst = &mut out[s * c..(s + 1) * c];
            for row in seg.start..seg.end() {
                dst.iter_mut().zip(&xv[row * c..(row + 1) * c]).for_each(|(o, v)| *o += v);
            }
            let inv = 1.0 / seg.len as f64;
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let needs = self.needs(x);
        let t = self.make(vec![segs.len(), c], out);
        Ok(self.push(t, Op::SegmentMean(x, Arc::new(segs.to_vec())), needs))
    }
}

/// Gradients of [`Graph::segment_attention`] with respect to `q`, `k`, `v`.
pub(crate) fn attention_backward(
    tape: &AttentionTape,
    (qv, kv, vv): (&[f64], &[f64], &[f64]),
    d: usize,
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gq = vec![0.0; qv.len()];
    let mut gk = vec![0.0; kv.len()];
    let mut gv = vec![0.0; vv.len()];
    let dh = d / tape.heads;
    let di = d as isize;
    let mut at = 0;
    let mut dp = Vec::new();
    for (qs, ks) in tape.q_segs.iter().zip(tape.k_segs.iter()) {
        let (lq, lk) = (qs.len, ks.len);
        let lki = lk as isize;
        for h in 0..tape.heads {
            let off = h * dh;
            let p = &tape.probs[at..at + lq * lk];
            let go = &gout[qs.start * d + off..];
            // dV += Pᵀ·dO
            gemm_strided(lk, lq, dh, p, (1, lki), go, (di, 1), &mut gv[ks.start * d + off..], (di, 1), true);
            // dP = dO·Vᵀ
            dp.clear();
            dp.resize(lq * lk, 0.0);
            gemm_strided(lq, dh, lk, go, (di, 1), &vv[ks.start * d + off..], (1, di), &mut dp, (lki, 1), false);
            // dS = P ⊙ (dP − Σ dP⊙P), folded with the logit scale.
            for (drow, prow) in dp.chunks_mut(lk).zip(p.chunks(lk)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (x, &pi) in drow.iter_mut().zip(prow) {
                    *x = pi * (*x - dot) * tape.scale;
                }
            }
            // dQ += dS·K, dK += dSᵀ·Q
            gemm_strided(lq, lk, dh, &dp, (lki, 1), &kv[ks.start * d + off..], (di, 1), &mut gq[qs.start * d + off..], (di, 1), true);
            gemm_strided(lk, lq, dh, &dp, (1, lki), &qv[qs.start * d + off..], (di, 1), &mut gk[ks.start * d + off..], (di, 1), true);
            at += lq * lk;
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{finite_difference_check, ParameterSet, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    /// Composed-op reference: slice each segment and head, softmax, concat.
    fn reference(g: &mut Graph, q: Var, k: Var, v: Var, qs: &[Segment], ks: &[Segment], heads: usize) -> Var {
        let d = g.shape(q)[1];
        let dh = d / heads;
        let mut blocks = Vec::new();
        for (a, b) in qs.iter().zip(ks) {
            let qa = g.slice_rows(q, a.start, a.end()).unwrap();
            let kb = g.slice_rows(k, b.start, b.end()).unwrap();
            let vb = g.slice_rows(v, b.start, b.end()).unwrap();
            let mut hs = Vec::new();
            for h in 0..heads {
                let qh = g.slice_cols(qa, h * dh, (h + 1) * dh).unwrap();
                let kh = g.slice_cols(kb, h * dh, (h + 1) * dh).unwrap();
                let vh = g.slice_cols(vb, h * dh, (h + 1) * dh).unwrap();
                let kt = g.transpose(kh).unwrap();
                let s = g.matmul(qh, kt).unwrap();
                let s = g.scale(s, 1.0 / (dh as f64).sqrt());
                let p = g.softmax(s, 1).unwrap();
                hs.push(g.matmul(p, vh).unwrap());
            }
            blocks.push(g.concat_cols(&hs).unwrap());
        }
        g.concat_rows(&blocks).unwrap()
    }

    #[test]
    fn matches_composed_reference() {
        let qs = segments_from_lengths(&[2, 3, 1]);
        let ks = vec![Segment::new(0, 4), Segment::new(2, 2), Segment::new(1, 5)];
        let mut g = Graph::new();
        let q = g.constant(random(&[6, 8], 1));
        let k = g.constant(random(&[6, 8], 2));
        let v = g.constant(random(&[6, 8], 3));
        let fast = g.segment_attention(q, k, v, &qs, &ks, 2).unwrap();
        let slow = reference(&mut g, q, k, v, &qs, &ks, 2);
        for (a, b) in g.values(fast).iter().zip(g.values(slow)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut params = ParameterSet::new();
        params.insert("x", random(&[7, 4], 4)).unwrap();
        params.insert("y", random(&[5, 4], 5)).unwrap();
        params.insert("w", random(&[7, 4], 6)).unwrap();
        let qs = segments_from_lengths(&[3, 4]);
        let ks = vec![Segment::new(0, 3), Segment::new(1, 4)];
        let report = finite_difference_check(&params, 1e-5, |g: &mut Graph, b| {
            let x = b.get("x")?;
            let y = b.get("y")?;
            let w = b.get("w")?;
            // Self-attention on x, then cross-attention from it into y.
            let s = g.segment_attention(x, x, x, &qs, &qs, 2)?;
            let c = g.segment_attention(s, y, y, &qs, &ks, 2)?;
            let m = g.mul(c, w)?;
            let pooled = g.segment_mean(m, &qs)?;
            let sq = g.mul(pooled, pooled)?;
            Ok::<_, TensorError>(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn segment_mean_averages_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap());
        let m = g.segment_mean(x, &[Segment::new(0, 2), Segment::new(2, 1)]).unwrap();
        assert_eq!(g.values(m), &[2.0, 3.0, 5.0, 9.0]);
    }

    #[test]
    fn out_of_range_segment_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.segment_attention(x, x, x, &[Segment::new(2, 2)], &[Segment::new(0, 1)], 1).is_err());
        assert!(g.segment_mean(x, &[Segment::new(0, 0)]).is_err());
    }
}
