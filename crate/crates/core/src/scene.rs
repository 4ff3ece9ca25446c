use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::vocab::{Vocabulary, RELATION_TOKEN};
use crate::{CoreError, Result};

/// One object instance occupying a grid cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub cell: usize,
    pub object: String,
    pub attributes: Vec<String>,
}

impl Placement {
    pub fn carries(&self, object: &str, attributes: &[String]) -> bool {
        self.object == object && attributes.iter().all(|a| self.attributes.contains(a))
    }
}

/// A symbolic image: objects with attribute sets on a `grid × grid` board.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub grid: usize,
    pub placements: Vec<Placement>,
}

impl Scene {
    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let mut cells = BTreeSet::new();
        for p in &self.placements {
            if p.cell >= self.cells() {
                return Err(CoreError::Validation(format!(
                    "scene {}: cell {} outside a {}×{} grid",
                    self.scene_id, p.cell, self.grid, self.grid
                )));
            }
            if !cells.insert(p.cell) {
                return Err(CoreError::Validation(format!(
                    "scene {}: cell {} used twice",
                    self.scene_id, p.cell
                )));
            }
            vocab.object_index(&p.object)?;
            let mut families = BTreeSet::new();
            for a in &p.attributes {
                if !families.insert(vocab.family_of(a)?) {
                    return Err(CoreError::Validation(format!(
                        "scene {}: two attributes of one family on cell {}",
                        self.scene_id, p.cell
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn has_object(&self, object: &str) -> bool {
        self.placements.iter().any(|p| p.object == object)
    }

    pub fn has_attribute(&self, attribute: &str) -> bool {
        self.placements
            .iter()
            .any(|p| p.attributes.iter().any(|a| a == attribute))
    }

    /// Whether some single instance is `object` carrying every attribute.
    pub fn realizes(&self, object: &str, attributes: &[String]) -> bool {
        self.placements.iter().any(|p| p.carries(object, attributes))
    }
}

/// One `attributes… object` phrase of a caption.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QueryPart {
    pub object: String,
    pub attributes: Vec<String>,
}

/// An attribute-object compound caption with one or two parts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub parts: Vec<QueryPart>,
    pub tokens: Vec<String>,
}

impl Query {
    /// Builds a caption with canonical adjective order. The id defaults to
    /// the rendered tokens joined by `-`.
    pub fn new(vocab: &Vocabulary, parts: Vec<QueryPart>, id: Option<String>) -> Result<Self> {
        if parts.is_empty() || parts.len() > 2 {
            return Err(CoreError::Contract(format!(
                "a query has one or two parts, got {}",
                parts.len()
            )));
        }
        let mut canonical = Vec::with_capacity(parts.len());
        let mut tokens = Vec::new();
        for (i, part) in parts.into_iter().enumerate() {
            vocab.object_index(&part.object)?;
            let attributes = vocab.canonical_attributes(&part.attributes)?;
            if i > 0 {
                tokens.push(RELATION_TOKEN.to_string());
            }
            tokens.extend(attributes.iter().cloned());
            tokens.push(part.object.clone());
            canonical.push(QueryPart {
                object: part.object,
                attributes,
            });
        }
        let query_id = id.unwrap_or_else(|| tokens.join("-"));
        Ok(Query {
            query_id,
            parts: canonical,
            tokens,
        })
    }

    pub fn single(vocab: &Vocabulary, object: &str, attributes: &[String]) -> Result<Self> {
        Query::new(
            vocab,
            vec![QueryPart {
                object: object.to_string(),
                attributes: attributes.to_vec(),
            }],
            None,
        )
    }

    pub fn is_multi(&self) -> bool {
        self.parts.len() == 2
    }

    /// Attribute count of a single-object query (summed over parts otherwise).
    pub fn attribute_count(&self) -> usize {
        self.parts.iter().map(|p| p.attributes.len()).sum()
    }

    /// Binding-correct truth: every part is carried by its own instance.
    pub fn is_true_of(&self, scene: &Scene) -> bool {
        match self.parts.as_slice() {
            [p] => scene.realizes(&p.object, &p.attributes),
            [p, q] => scene.placements.iter().enumerate().any(|(i, a)| {
                a.carries(&p.object, &p.attributes)
                    && scene
                        .placements
                        .iter()
                        .enumerate()
                        .any(|(j, b)| j != i && b.carries(&q.object, &q.attributes))
            }),
            _ => false,
        }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}
