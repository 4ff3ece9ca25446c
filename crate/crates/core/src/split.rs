//! Seen/unseen partition of test compounds.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scene::{Query, Scene};
use crate::util::mix_seed;
use crate::{CoreError, Result};

/// All four id lists are kept sorted; lookups binary-search them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub train_scenes: Vec<String>,
    pub test_scenes: Vec<String>,
}

impl SplitSpec {
    pub fn is_unseen(&self, query_id: &str) -> bool {
        self.unseen.binary_search_by(|q| q.as_str().cmp(query_id)).is_ok()
    }

    pub fn is_seen(&self, query_id: &str) -> bool {
        self.seen.binary_search_by(|q| q.as_str().cmp(query_id)).is_ok()
    }
}

/// Number of scenes realizing each query.
pub fn occurrence_counts(queries: &[Query], scenes: &[Scene]) -> Vec<usize> {
    queries
        .iter()
        .map(|q| scenes.iter().filter(|s| q.is_true_of(s)).count())
        .collect()
}

/// Marks the `k_unseen` least frequent training compounds as unseen and
/// removes every training scene that realizes one of them.
pub fn split_seen_unseen(
    queries: &[Query],
    train_scenes: &[Scene],
    test_scenes: &[Scene],
    k_unseen: usize,
    seed: u64,
) -> Result<(SplitSpec, Vec<Scene>)> {
    if k_unseen > queries.len() {
        return Err(CoreError::Split(format!(
            "cannot hold out {k_unseen} of {} queries",
            queries.len()
        )));
    }
    let counts = occurrence_counts(queries, train_scenes);
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5e1)));
    order.sort_by_key(|&i| counts[i]);
    let unseen_idx: BTreeSet<usize> = order[..k_unseen].iter().copied().collect();
    let kept: Vec<Scene> = train_scenes
        .iter()
        .filter(|s| !unseen_idx.iter().any(|&i| queries[i].is_true_of(s)))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(CoreError::Split("holding out the unseen compounds empties the train set".into()));
    }
    let train_ids: BTreeSet<&str> = kept.iter().map(|s| s.scene_id.as_str()).collect();
    if let Some(shared) = test_scenes.iter().find(|s| train_ids.contains(s.scene_id.as_str())) {
        return Err(CoreError::Split(format!("scene {} is in both train and test", shared.scene_id)));
    }
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        if unseen_idx.contains(&i) {
            unseen.push(q.query_id.clone());
        } else {
            seen.push(q.query_id.clone());
        }
    }
    seen.sort();
    unseen.sort();
    let mut test: Vec<String> = test_scenes.iter().map(|s| s.scene_id.clone()).collect();
    test.sort();
    Ok((
        SplitSpec {
            seen,
            unseen,
            train_scenes: train_ids.into_iter().map(str::to_string).collect(),
            test_scenes: test,
        },
        kept,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::{gen_single_obj_dataset, SingleObjSpec, Span};
    use crate::vocab::Vocabulary;

    fn data() -> (Vec<Query>, Vec<Scene>, Vec<Scene>) {
        let v = Vocabulary::default();
        let spec = |n, p: &str| SingleObjSpec {
            n_scenes: n,
            attrs_per_object: Span::new(2, 3),
            objects_per_scene: Span::new(2, 4),
            grid: 4,
            id_prefix: p.into(),
        };
        let train = gen_single_obj_dataset(&v, &spec(300, "train"), 1).unwrap();
        let test = gen_single_obj_dataset(&v, &spec(40, "test"), 2).unwrap();
        (test.queries, train.scenes, test.scenes)
    }

    #[test]
    fn unseen_compounds_leave_the_train_set() {
        let (queries, train, test) = data();
        let (split, kept) = split_seen_unseen(&queries, &train, &test, 20, 3).unwrap();
        assert_eq!(split.unseen.len(), 20);
        assert_eq!(split.seen.len() + split.unseen.len(), queries.len());
        for q in queries.iter().filter(|q| split.is_unseen(&q.query_id)) {
            assert!(kept.iter().all(|s| !q.is_true_of(s)));
        }
        assert!(split.seen.iter().all(|q| !split.is_unseen(q)));
    }

    #[test]
    fn selection_follows_frequency_order() {
        let (queries, train, test) = data();
        let counts = occurrence_counts(&queries, &train);
        let (split, _) = split_seen_unseen(&queries, &train, &test, 10, 3).unwrap();
        let max_unseen = queries
            .iter()
            .zip(&counts)
            .filter(|(q, _)| split.is_unseen(&q.query_id))
            .map(|(_, c)| *c)
            .max()
            .unwrap();
        let min_seen = queries
            .iter()
            .zip(&counts)
            .filter(|(q, _)| split.is_seen(&q.query_id))
            .map(|(_, c)| *c)
            .min()
            .unwrap();
        assert!(max_unseen <= min_seen);
    }

    #[test]
    fn too_many_unseen_is_an_error() {
        let (queries, train, test) = data();
        assert!(split_seen_unseen(&queries, &train, &test, queries.len() + 1, 0).is_err());
        let lone: Vec<Scene> = train.iter().filter(|s| queries[0].is_true_of(s)).take(1).cloned().collect();
        assert!(matches!(
            split_seen_unseen(&queries[..1], &lone, &test, 1, 0),
            Err(CoreError::Split(_))
        ));
    }
}
