//! Candidate pools for retrieval queries.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::scene::{Query, Scene};
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Scenes containing at least one query word.
    Or,
    /// Scenes containing every query word somewhere.
    And,
    /// Every scene.
    All,
}

impl PoolMode {
    pub const ALL_MODES: [PoolMode; 3] = [PoolMode::Or, PoolMode::And, PoolMode::All];

    pub fn admits(self, query: &Query, scene: &Scene) -> bool {
        let words = query.parts.iter().flat_map(|p| {
            std::iter::once((true, &p.object)).chain(p.attributes.iter().map(|a| (false, a)))
        });
        let present = |(is_object, w): (bool, &String)| {
            if is_object {
                scene.has_object(w)
            } else {
                scene.has_attribute(w)
            }
        };
        match self {
            PoolMode::Or => words.into_iter().any(present),
            PoolMode::And => words.into_iter().all(present),
            PoolMode::All => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::Or => "or",
            PoolMode::And => "and",
            PoolMode::All => "all",
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "or" => Ok(PoolMode::Or),
            "and" => Ok(PoolMode::And),
            "all" => Ok(PoolMode::All),
            other => Err(CoreError::Config(format!("unknown pool mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalPool {
    pub query_id: String,
    pub mode: PoolMode,
    /// Candidate scene ids, ascending.
    pub candidates: Vec<String>,
    /// `relevance[i]` is true iff the query is true of `candidates[i]`.
    pub relevance: Vec<bool>,
}

impl RetrievalPool {
    pub fn relevant_count(&self) -> usize {
        self.relevance.iter().filter(|r| **r).count()
    }
}

pub fn build_pool(query: &Query, scenes: &[Scene], mode: PoolMode) -> Result<RetrievalPool> {
    let mut members: Vec<(&str, bool)> = scenes
        .iter()
        .filter(|s| mode.admits(query, s))
        .map(|s| (s.scene_id.as_str(), query.is_true_of(s)))
        .collect();
    members.sort_unstable();
    members.dedup_by(|a, b| a.0 == b.0);
    if !members.iter().any(|(_, r)| *r) {
        return Err(CoreError::Pool {
            query: query.query_id.clone(),
            message: format!("no relevant scene among {} {mode}-pool candidates", members.len()),
        });
    }
    Ok(RetrievalPool {
        query_id: query.query_id.clone(),
        mode,
        candidates: members.iter().map(|(id, _)| id.to_string()).collect(),
        relevance: members.iter().map(|(_, r)| *r).collect(),
    })
}

pub fn build_pools(queries: &[Query], scenes: &[Scene], mode: PoolMode) -> Result<Vec<RetrievalPool>> {
    queries.iter().map(|q| build_pool(q, scenes, mode)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Placement;
    use crate::vocab::Vocabulary;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn scene(id: &str, placements: &[(&str, &[&str])]) -> Scene {
        Scene {
            scene_id: id.into(),
            grid: 4,
            placements: placements
                .iter()
                .enumerate()
                .map(|(cell, (o, a))| Placement {
                    cell,
                    object: o.to_string(),
                    attributes: s(a),
                })
                .collect(),
        }
    }

    #[test]
    fn word_overlap_without_binding_is_irrelevant() {
        let v = Vocabulary::default();
        let q = Query::single(&v, "cube", &s(&["red"])).unwrap();
        let scenes = vec![
            scene("b", &[("cube", &["blue"]), ("sphere", &["red"])]),
            scene("a", &[("cube", &["red"])]),
            scene("c", &[("cone", &["green"])]),
        ];
        let or = build_pool(&q, &scenes, PoolMode::Or).unwrap();
        assert_eq!(or.candidates, ["a", "b"]);
        assert_eq!(or.relevance, [true, false]);
        let all = build_pool(&q, &scenes, PoolMode::All).unwrap();
        assert_eq!(all.candidates.len(), 3);
    }

    #[test]
    fn missing_relevant_scene_names_the_query() {
        let v = Vocabulary::default();
        let q = Query::single(&v, "cube", &s(&["red"])).unwrap();
        let scenes = vec![scene("x", &[("cube", &["blue"])])];
        match build_pool(&q, &scenes, PoolMode::Or) {
            Err(CoreError::Pool { query, .. }) => assert_eq!(query, "red-cube"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in PoolMode::ALL_MODES {
            assert_eq!(m.as_str().parse::<PoolMode>().unwrap(), m);
        }
        assert!("xor".parse::<PoolMode>().is_err());
    }
}
