use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Attribute families. Declaration order is the adjective order used when
/// rendering captions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Size,
    Shape,
    Color,
    Material,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Size, Family::Shape, Family::Color, Family::Material];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub family: Family,
}

/// The object set and the family-tagged attribute set of a synthetic world.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub objects: Vec<String>,
    pub attributes: Vec<Attribute>,
}

/// Token joining the two parts of a multi-object caption. It carries no
/// relational meaning.
pub const RELATION_TOKEN: &str = "and";

impl Default for Vocabulary {
    /// Twelve objects and twelve attributes, three per family.
    fn default() -> Self {
        let objects = [
            "cube", "sphere", "cylinder", "cone", "torus", "block", "plate", "cup", "bowl",
            "table", "chair", "vase",
        ];
        let attributes = [
            ("small", Family::Size),
            ("medium", Family::Size),
            ("large", Family::Size),
            ("round", Family::Shape),
            ("square", Family::Shape),
            ("flat", Family::Shape),
            ("red", Family::Color),
            ("green", Family::Color),
            ("blue", Family::Color),
            ("metal", Family::Material),
            ("rubber", Family::Material),
            ("wooden", Family::Material),
        ];
        Vocabulary {
            objects: objects.iter().map(|s| s.to_string()).collect(),
            attributes: attributes
                .iter()
                .map(|(n, f)| Attribute {
                    name: n.to_string(),
                    family: *f,
                })
                .collect(),
        }
    }
}

impl Vocabulary {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(CoreError::Vocabulary("no objects".into()));
        }
        let mut seen = BTreeSet::new();
        for name in self
            .objects
            .iter()
            .chain(self.attributes.iter().map(|a| &a.name))
        {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(CoreError::Vocabulary(format!("invalid name `{name}`")));
            }
            if name == RELATION_TOKEN {
                return Err(CoreError::Vocabulary(format!(
                    "`{name}` is reserved for the relation token"
                )));
            }
            if !seen.insert(name) {
                return Err(CoreError::Vocabulary(format!("duplicate name `{name}`")));
            }
        }
        Ok(())
    }

    pub fn object_index(&self, name: &str) -> Result<usize> {
        self.objects
            .iter()
            .position(|o| o == name)
            .ok_or_else(|| CoreError::Vocabulary(format!("unknown object `{name}`")))
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| CoreError::Vocabulary(format!("unknown attribute `{name}`")))
    }

    pub fn family_of(&self, attribute: &str) -> Result<Family> {
        Ok(self.attributes[self.attribute_index(attribute)?].family)
    }

    /// Attribute names grouped by family, families in caption order.
    pub fn by_family(&self) -> BTreeMap<Family, Vec<String>> {
        let mut map: BTreeMap<Family, Vec<String>> = BTreeMap::new();
        for a in &self.attributes {
            map.entry(a.family).or_default().push(a.name.clone());
        }
        map
    }

    /// Sorts attribute names into caption order (family, then vocabulary order).
    pub fn canonical_attributes(&self, attrs: &[String]) -> Result<Vec<String>> {
        let mut keyed = attrs
            .iter()
            .map(|a| {
                let idx = self.attribute_index(a)?;
                Ok(((self.attributes[idx].family, idx), a.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        keyed.sort();
        Ok(keyed.into_iter().map(|(_, a)| a).collect())
    }

    /// Token list: objects, then attributes, then the relation token.
    pub fn tokens(&self) -> Vec<String> {
        let mut t = self.objects.clone();
        t.extend(self.attributes.iter().map(|a| a.name.clone()));
        t.push(RELATION_TOKEN.to_string());
        t
    }
}
