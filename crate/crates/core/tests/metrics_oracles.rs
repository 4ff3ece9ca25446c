//! Metrics against brute-force re-implementations, plus order invariances.

use std::collections::BTreeMap;

use bindlab_core::metrics::{
    average_precision, map_by_attribute_count, map_over_pools, mean_ranks, multiobj_i2t_accuracy,
    multiobj_t2i_accuracy, rank, QuadScores,
};
use bindlab_core::pools::{PoolMode, RetrievalPool};
use bindlab_core::split::SplitSpec;
use proptest::prelude::*;

/// 1-based rank of candidate `i`: one plus the number that beat it.
fn brute_rank(ids: &[String], scores: &[f64], i: usize) -> usize {
    1 + (0..ids.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && ids[j] < ids[i]))
        .count()
}

fn brute_ap(pool: &RetrievalPool, scores: &[f64]) -> f64 {
    let ranks: Vec<usize> = (0..scores.len()).map(|i| brute_rank(&pool.candidates, scores, i)).collect();
    let rel: Vec<usize> = (0..scores.len()).filter(|&i| pool.relevance[i]).collect();
    let mut total = 0.0;
    for &i in &rel {
        let above = rel.iter().filter(|&&j| ranks[j] <= ranks[i]).count();
        total += above as f64 / ranks[i] as f64;
    }
    total / rel.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone)]
struct Instance {
    pools: Vec<RetrievalPool>,
    scores: Vec<Vec<f64>>,
    unseen: Vec<bool>,
    counts: Vec<usize>,
}

/// Scores drawn from a small set so ties are common.
fn instance() -> impl Strategy<Value = Instance> {
    prop::collection::vec(
        (prop::collection::vec((any::<bool>(), 0u8..6), 2..12), any::<bool>(), 2usize..5),
        2..20,
    )
    .prop_map(|qs| {
        let mut pools = Vec::new();
        let mut scores = Vec::new();
        let mut unseen = Vec::new();
        let mut counts = Vec::new();
        for (k, (cands, u, c)) in qs.into_iter().enumerate() {
            let mut relevance: Vec<bool> = cands.iter().map(|x| x.0).collect();
            relevance[k % cands.len()] = true;
            relevance[(k + 1) % cands.len()] = false;
            pools.push(RetrievalPool {
                query_id: format!("q{k:02}"),
                mode: PoolMode::Or,
                // 7 is invertible mod 13, so ids are distinct but not sorted.
                candidates: (0..cands.len()).map(|i| format!("s{:02}", (i * 7) % 13)).collect(),
                relevance,
            });
            scores.push(cands.iter().map(|x| f64::from(x.1) / 4.0).collect());
            unseen.push(u);
            counts.push(c);
        }
        unseen[0] = false;
        unseen[1] = true;
        Instance {
            pools,
            scores,
            unseen,
            counts,
        }
    })
}

fn split_of(inst: &Instance) -> SplitSpec {
    let (mut seen, mut unseen) = (Vec::new(), Vec::new());
    for (p, &u) in inst.pools.iter().zip(&inst.unseen) {
        if u { &mut unseen } else { &mut seen }.push(p.query_id.clone());
    }
    SplitSpec {
        seen,
        unseen,
        train_scenes: vec![],
        test_scenes: vec![],
    }
}

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 100,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn map_matches_brute_force(inst in instance()) {
        let got = map_over_pools(&inst.pools, &inst.scores, &split_of(&inst)).unwrap();
        let aps: Vec<f64> = inst.pools.iter().zip(&inst.scores).map(|(p, s)| brute_ap(p, s)).collect();
        let pick = |want: bool| -> Vec<f64> {
            aps.iter().zip(&inst.unseen).filter(|(_, &u)| u == want).map(|(a, _)| *a).collect()
        };
        prop_assert!((got.all.map - mean(&aps)).abs() < 1e-12);
        prop_assert!((got.seen.map - mean(&pick(false))).abs() < 1e-12);
        prop_assert!((got.unseen.map - mean(&pick(true))).abs() < 1e-12);
        for (p, a) in inst.pools.iter().zip(&aps) {
            prop_assert!((got.per_query[&p.query_id] - a).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_ranks_match_brute_force(inst in instance()) {
        let (r, i) = mean_ranks(&inst.pools, &inst.scores).unwrap();
        let (mut rel, mut irr) = (Vec::new(), Vec::new());
        for (p, s) in inst.pools.iter().zip(&inst.scores) {
            for k in 0..s.len() {
                let rank = brute_rank(&p.candidates, s, k) as f64;
                if p.relevance[k] { rel.push(rank) } else { irr.push(rank) }
            }
        }
        prop_assert!((r - mean(&rel)).abs() < 1e-12);
        prop_assert!((i - mean(&irr)).abs() < 1e-12);
    }

    #[test]
    fn ap_is_invariant_under_monotone_transforms(inst in instance()) {
        for (p, s) in inst.pools.iter().zip(&inst.scores) {
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() + 2.0).collect();
            let ap = |scores: &[f64]| average_precision(&rank(p, scores).unwrap().relevance).unwrap();
            prop_assert_eq!(ap(s).to_bits(), ap(&t).to_bits());
            prop_assert!((ap(s) - brute_ap(p, s)).abs() < 1e-12);
        }
    }

    #[test]
    fn attribute_curve_matches_filter_then_map(inst in instance()) {
        let curve = map_by_attribute_count(&inst.pools, &inst.scores, &inst.counts).unwrap();
        let mut buckets: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for ((p, s), &c) in inst.pools.iter().zip(&inst.scores).zip(&inst.counts) {
            buckets.entry(c).or_default().push(brute_ap(p, s));
        }
        prop_assert_eq!(curve.keys().collect::<Vec<_>>(), buckets.keys().collect::<Vec<_>>());
        let total: usize = curve.values().map(|g| g.queries).sum();
        prop_assert_eq!(total, inst.pools.len());
        for (c, aps) in &buckets {
            prop_assert!((curve[c].map - mean(aps)).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracies_match_brute_force(raw in prop::collection::vec(prop::array::uniform4(0u8..4), 1..50)) {
        let qs: Vec<QuadScores> = raw.iter().map(|r| QuadScores {
            image_caption: f64::from(r[0]),
            distractor_caption: f64::from(r[1]),
            distractor_swapped: f64::from(r[2]),
            image_swapped: f64::from(r[3]),
        }).collect();
        let t2i = raw.iter().filter(|r| r[0] > r[1] && r[2] > r[3]).count() as f64 * 100.0 / raw.len() as f64;
        let i2t = raw.iter().map(|r| usize::from(r[0] > r[3]) + usize::from(r[2] > r[1])).sum::<usize>() as f64
            * 100.0 / (2 * raw.len()) as f64;
        prop_assert!((multiobj_t2i_accuracy(&qs).unwrap() - t2i).abs() < 1e-12);
        prop_assert!((multiobj_i2t_accuracy(&qs).unwrap() - i2t).abs() < 1e-12);
    }
}
