//! Class vocabularies shared by every stage of the pipeline.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::GraphError;

/// One ordered list of names with a reverse index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameList {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl NameList {
    pub fn new(kind: &'static str, names: Vec<String>) -> Result<Self, GraphError> {
        if names.is_empty() {
            return Err(GraphError::Vocab(format!("{kind} list is empty")));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(GraphError::Vocab(format!("{kind} #{i} has an empty name")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(GraphError::Vocab(format!("duplicate {kind} name {name:?}")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, idx: usize) -> Option<&str> {
        self.names.get(idx).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Object, predicate and attribute vocabularies.
///
/// Indices are positions in the lists and never change for a loaded vocab.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub objects: NameList,
    pub predicates: NameList,
    pub attributes: NameList,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    object_classes: Vec<String>,
    predicate_classes: Vec<String>,
    attribute_classes: Vec<String>,
}

impl Vocab {
    pub fn new(
        objects: Vec<String>,
        predicates: Vec<String>,
        attributes: Vec<String>,
    ) -> Result<Self, GraphError> {
        Ok(Self {
            objects: NameList::new("object", objects)?,
            predicates: NameList::new("predicate", predicates)?,
            attributes: NameList::new("attribute", attributes)?,
        })
    }

    pub fn from_strs(objects: &[&str], predicates: &[&str], attributes: &[&str]) -> Result<Self, GraphError> {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self::new(own(objects), own(predicates), own(attributes))
    }

    pub fn object_name(&self, idx: usize) -> &str {
        self.objects.name(idx).unwrap_or("<unknown>")
    }

    pub fn predicate_name(&self, idx: usize) -> &str {
        self.predicates.name(idx).unwrap_or("<unknown>")
    }

    pub fn attribute_name(&self, idx: usize) -> &str {
        self.attributes.name(idx).unwrap_or("<unknown>")
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            object_classes: self.objects.names().to_vec(),
            predicate_classes: self.predicates.names().to_vec(),
            attribute_classes: self.attributes.names().to_vec(),
        };
        let value = serde_json::to_value(file).expect("vocab serializes");
        crate::json::canonical_string(&value)
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let file: VocabFile = serde_json::from_str(text).map_err(GraphError::from_json)?;
        Self::new(file.object_classes, file.predicate_classes, file.attribute_classes)
    }

    /// Hex SHA-256 of the canonical JSON form; used to tie checkpoints to a vocab.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_is_a_bijection() {
        let v = Vocab::from_strs(&["circle", "square"], &["left of", "near"], &["red"]).unwrap();
        for (i, name) in v.objects.names().iter().enumerate() {
            assert_eq!(v.objects.index_of(name), Some(i));
            assert_eq!(v.objects.name(i), Some(name.as_str()));
        }
        assert_eq!(v.predicates.index_of("near"), Some(1));
        assert_eq!(v.predicates.index_of("far"), None);
    }

    #[test]
    fn rejects_duplicates_and_empty_lists() {
        assert!(Vocab::from_strs(&["a", "a"], &["p"], &["x"]).is_err());
        assert!(Vocab::from_strs(&[], &["p"], &["x"]).is_err());
        assert!(Vocab::from_strs(&["a"], &[""], &["x"]).is_err());
    }

    #[test]
    fn json_round_trip_keeps_fingerprint() {
        let v = Vocab::from_strs(&["circle", "square"], &["left of"], &["red", "blue"]).unwrap();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.fingerprint(), back.fingerprint());
    }
}
