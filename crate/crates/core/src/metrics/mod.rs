//! Retrieval metrics: average precision over candidate pools, mean ranks,
//! and the two multi-object accuracies.

mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::pools::RetrievalPool;
use crate::split::SplitSpec;
use crate::{CoreError, Result};

pub use report::{MetricReport, ReportMeta, REPORT_SCHEMA_VERSION};

/// Mean over relevant positions `k` (1-based) of `hits_in_top_k / k`.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(CoreError::Metric("average precision needs a relevant item".into()));
    }
    Ok(sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
    pub relevance: Vec<bool>,
}

/// Orders a pool by descending score, ties by ascending candidate id.
pub fn rank(pool: &RetrievalPool, scores: &[f64]) -> Result<Ranking> {
    if scores.len() != pool.candidates.len() {
        return Err(CoreError::Metric(format!(
            "query {}: {} scores for {} candidates",
            pool.query_id,
            scores.len(),
            pool.candidates.len()
        )));
    }
    if let Some(k) = scores.iter().position(|s| s.is_nan()) {
        return Err(CoreError::Metric(format!("query {}: score {k} is NaN", pool.query_id)));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| pool.candidates[a].cmp(&pool.candidates[b]))
    });
    Ok(Ranking {
        query_id: pool.query_id.clone(),
        candidates: order.iter().map(|&i| pool.candidates[i].clone()).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
        relevance: order.iter().map(|&i| pool.relevance[i]).collect(),
    })
}

/// MAP of one query group and the number of queries in it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMap {
    pub map: f64,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolMaps {
    pub all: GroupMap,
    pub seen: GroupMap,
    pub unseen: GroupMap,
    pub per_query: BTreeMap<String, f64>,
}

fn group(name: &str, aps: &[f64]) -> Result<GroupMap> {
    if aps.is_empty() {
        return Err(CoreError::Metric(format!("query group `{name}` is empty")));
    }
    Ok(GroupMap {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        queries: aps.len(),
    })
}

/// Per-query AP for parallel `pools` and `scores`.
pub fn per_query_ap(pools: &[RetrievalPool], scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    if pools.len() != scores.len() {
        return Err(CoreError::Metric(format!("{} pools but {} score lists", pools.len(), scores.len())));
    }
    pools
        .iter()
        .zip(scores)
        .map(|(p, s)| average_precision(&rank(p, s)?.relevance))
        .collect()
}

/// Unweighted MAP over all, seen and unseen queries of one pool mode.
pub fn map_over_pools(pools: &[RetrievalPool], scores: &[Vec<f64>], split: &SplitSpec) -> Result<PoolMaps> {
    if let Some(p) = pools.iter().find(|p| p.mode != pools[0].mode) {
        return Err(CoreError::Metric(format!("pool of {} mixes modes", p.query_id)));
    }
    let aps = per_query_ap(pools, scores)?;
    let (mut seen, mut unseen) = (Vec::new(), Vec::new());
    for (p, &ap) in pools.iter().zip(&aps) {
        if split.is_unseen(&p.query_id) {
            unseen.push(ap);
        } else if split.is_seen(&p.query_id) {
            seen.push(ap);
        } else {
            return Err(CoreError::Metric(format!("query {} is neither seen nor unseen", p.query_id)));
        }
    }
    Ok(PoolMaps {
        all: group("all", &aps)?,
        seen: group("seen", &seen)?,
        unseen: group("unseen", &unseen)?,
        per_query: pools.iter().zip(&aps).map(|(p, &a)| (p.query_id.clone(), a)).collect(),
    })
}

/// Mean 1-based rank of relevant and of irrelevant candidates, pooled over
/// all queries.
pub fn mean_ranks(pools: &[RetrievalPool], scores: &[Vec<f64>]) -> Result<(f64, f64)> {
    let (mut rel, mut irr) = ((0.0, 0usize), (0.0, 0usize));
    if pools.len() != scores.len() {
        return Err(CoreError::Metric(format!("{} pools but {} score lists", pools.len(), scores.len())));
    }
    for (p, s) in pools.iter().zip(scores) {
        let r = rank(p, s)?;
        for (k, &is_rel) in r.relevance.iter().enumerate() {
            let slot = if is_rel { &mut rel } else { &mut irr };
            slot.0 += (k + 1) as f64;
            slot.1 += 1;
        }
    }
    if rel.1 == 0 || irr.1 == 0 {
        return Err(CoreError::Metric("mean ranks need relevant and irrelevant candidates".into()));
    }
    Ok((rel.0 / rel.1 as f64, irr.0 / irr.1 as f64))
}

/// Scores of the four image-caption combinations of a quadruplet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadScores {
    /// f(I, M)
    pub image_caption: f64,
    /// f(I', M)
    pub distractor_caption: f64,
    /// f(I', M')
    pub distractor_swapped: f64,
    /// f(I, M')
    pub image_swapped: f64,
}

impl QuadScores {
    pub fn t2i_correct(&self) -> bool {
        self.image_caption > self.distractor_caption && self.distractor_swapped > self.image_swapped
    }

    /// Correct choices among the two images (0, 1 or 2).
    pub fn i2t_correct(&self) -> usize {
        usize::from(self.image_caption > self.image_swapped)
            + usize::from(self.distractor_swapped > self.distractor_caption)
    }
}

/// Percent of quadruplets where both captions pick their own image, by
/// strict inequality.
pub fn multiobj_t2i_accuracy(quads: &[QuadScores]) -> Result<f64> {
    if quads.is_empty() {
        return Err(CoreError::Metric("no quadruplets to score".into()));
    }
    let ok = quads.iter().filter(|q| q.t2i_correct()).count();
    Ok(100.0 * ok as f64 / quads.len() as f64)
}

/// Percent of images whose true caption strictly beats the swapped one.
pub fn multiobj_i2t_accuracy(quads: &[QuadScores]) -> Result<f64> {
    if quads.is_empty() {
        return Err(CoreError::Metric("no quadruplets to score".into()));
    }
    let ok: usize = quads.iter().map(QuadScores::i2t_correct).sum();
    Ok(100.0 * ok as f64 / (2 * quads.len()) as f64)
}

/// MAP per attribute count; counts without queries are left out.
pub fn map_by_attribute_count(
    pools: &[RetrievalPool],
    scores: &[Vec<f64>],
    counts: &[usize],
) -> Result<BTreeMap<usize, GroupMap>> {
    if counts.len() != pools.len() {
        return Err(CoreError::Metric(format!("{} counts for {} pools", counts.len(), pools.len())));
    }
    let aps = per_query_ap(pools, scores)?;
    let mut buckets: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&c, ap) in counts.iter().zip(aps) {
        buckets.entry(c).or_default().push(ap);
    }
    buckets
        .into_iter()
        .map(|(c, v)| Ok((c, group(&format!("{c} attributes"), &v)?)))
        .collect()
}
