//! Scene-graph data model, validation and canonical JSON form.
//!
//! JSON layout (keys sorted, floats at four decimals, optional fields omitted):
//!
//! ```text
//! {"image_size":[64,64],
//!  "objects":[{"attributes":["red"],"bbox":[x_min,y_min,x_max,y_max],"class":"circle","id":0}],
//!  "relations":[{"object":1,"predicate":"left of","subject":0}]}
//! ```
//!
//! Classes, attributes and predicates are written by name, so a graph file is
//! only meaningful together with the vocabulary it was written against.

use std::collections::HashSet;
use std::fmt;

use serde_json::{json, Map, Value};

use crate::error::GraphError;
use crate::json::{canonical_string, quantize};
use crate::vocab::Vocab;

/// Relation cap from the annotation filtering rules.
pub const DEFAULT_MAX_RELATIONS: usize = 20;

/// Axis-aligned box in pixel coordinates, stored on the canonical float grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min: quantize(x_min),
            y_min: quantize(y_min),
            x_max: quantize(x_max),
            y_max: quantize(y_max),
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// `self` lies entirely within `other`.
    pub fn contained_in(&self, other: &BBox) -> bool {
        self.x_min >= other.x_min
            && self.y_min >= other.y_min
            && self.x_max <= other.x_max
            && self.y_max <= other.y_max
    }

    pub fn is_well_formed(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= width as f64
            && self.y_max <= height as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectNode {
    pub id: u32,
    pub class_id: usize,
    pub attributes: Vec<usize>,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationTriple {
    pub subject_id: u32,
    pub predicate_id: usize,
    pub object_id: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneGraph {
    pub objects: Vec<ObjectNode>,
    pub relations: Vec<RelationTriple>,
    pub image_size: Option<(u32, u32)>,
}

impl SceneGraph {
    pub fn object(&self, id: u32) -> Option<&ObjectNode> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Class of the node with the given id.
    pub fn class_of(&self, id: u32) -> Option<usize> {
        self.object(id).map(|o| o.class_id)
    }
}

/// One broken invariant found by [`validate_graph`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateObjectId(u32),
    UnknownObjectClass { id: u32, class_id: usize },
    UnknownAttribute { id: u32, attribute: usize },
    MalformedBBox { id: u32 },
    BBoxOutOfBounds { id: u32 },
    SelfRelation(RelationTriple),
    DanglingRelation(RelationTriple),
    UnknownPredicate(RelationTriple),
    DuplicateTriple(RelationTriple),
    RelationCount { count: usize, max: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateObjectId(id) => write!(f, "duplicate object id {id}"),
            Violation::UnknownObjectClass { id, class_id } => {
                write!(f, "object {id}: class index {class_id} not in vocabulary")
            }
            Violation::UnknownAttribute { id, attribute } => {
                write!(f, "object {id}: attribute index {attribute} not in vocabulary")
            }
            Violation::MalformedBBox { id } => write!(f, "object {id}: bbox has non-positive extent"),
            Violation::BBoxOutOfBounds { id } => write!(f, "object {id}: bbox outside image bounds"),
            Violation::SelfRelation(t) => write!(f, "relation {t:?}: subject equals object"),
            Violation::DanglingRelation(t) => write!(f, "relation {t:?}: references a missing object"),
            Violation::UnknownPredicate(t) => write!(f, "relation {t:?}: predicate not in vocabulary"),
            Violation::DuplicateTriple(t) => write!(f, "relation {t:?}: duplicate triple"),
            Violation::RelationCount { count, max } => {
                write!(f, "relation-count: {count} relations exceeds maximum {max}")
            }
        }
    }
}

pub fn validate_graph(g: &SceneGraph, v: &Vocab) -> Vec<Violation> {
    validate_graph_with(g, v, DEFAULT_MAX_RELATIONS)
}

/// Checks every graph invariant against `v`; an empty result means valid.
pub fn validate_graph_with(g: &SceneGraph, v: &Vocab, max_relations: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for obj in &g.objects {
        if !ids.insert(obj.id) {
            out.push(Violation::DuplicateObjectId(obj.id));
        }
        if obj.class_id >= v.objects.len() {
            out.push(Violation::UnknownObjectClass {
                id: obj.id,
                class_id: obj.class_id,
            });
        }
        for &a in &obj.attributes {
            if a >= v.attributes.len() {
                out.push(Violation::UnknownAttribute { id: obj.id, attribute: a });
            }
        }
        if let Some(b) = obj.bbox {
            if !b.is_well_formed() {
                out.push(Violation::MalformedBBox { id: obj.id });
            } else if let Some((w, h)) = g.image_size {
                if !b.within(w, h) {
                    out.push(Violation::BBoxOutOfBounds { id: obj.id });
                }
            }
        }
    }
    let mut seen = HashSet::new();
    for t in &g.relations {
        if t.subject_id == t.object_id {
            out.push(Violation::SelfRelation(*t));
        }
        if !ids.contains(&t.subject_id) || !ids.contains(&t.object_id) {
            out.push(Violation::DanglingRelation(*t));
        }
        if t.predicate_id >= v.predicates.len() {
            out.push(Violation::UnknownPredicate(*t));
        }
        if !seen.insert(*t) {
            out.push(Violation::DuplicateTriple(*t));
        }
    }
    if g.relations.len() > max_relations {
        out.push(Violation::RelationCount {
            count: g.relations.len(),
            max: max_relations,
        });
    }
    out
}

/// JSON value form (names, not indices). Shared with manifest records.
pub fn graph_to_value(g: &SceneGraph, v: &Vocab) -> Value {
    let objects: Vec<Value> = g
        .objects
        .iter()
        .map(|o| {
            let mut m = Map::new();
            m.insert("id".into(), json!(o.id));
            m.insert("class".into(), json!(v.object_name(o.class_id)));
            m.insert(
                "attributes".into(),
                Value::Array(o.attributes.iter().map(|&a| json!(v.attribute_name(a))).collect()),
            );
            if let Some(b) = o.bbox {
                m.insert("bbox".into(), float_array(&[b.x_min, b.y_min, b.x_max, b.y_max]));
            }
            Value::Object(m)
        })
        .collect();
    let relations: Vec<Value> = g
        .relations
        .iter()
        .map(|t| {
            json!({
                "subject": t.subject_id,
                "predicate": v.predicate_name(t.predicate_id),
                "object": t.object_id,
            })
        })
        .collect();
    let mut root = Map::new();
    root.insert("objects".into(), Value::Array(objects));
    root.insert("relations".into(), Value::Array(relations));
    if let Some((w, h)) = g.image_size {
        root.insert("image_size".into(), json!([w, h]));
    }
    Value::Object(root)
}

// Integral coordinates still print as floats (serde_json keeps the f64 tag).
fn float_array(xs: &[f64]) -> Value {
    Value::Array(
        xs.iter()
            .map(|&x| serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null))
            .collect(),
    )
}

pub fn serialize_graph(g: &SceneGraph, v: &Vocab) -> String {
    canonical_string(&graph_to_value(g, v))
}

pub fn parse_graph(text: &str, v: &Vocab) -> Result<SceneGraph, GraphError> {
    let value: Value = serde_json::from_str(text).map_err(GraphError::from_json)?;
    graph_from_value(&value, v)
}

fn field<'a>(m: &'a Map<String, Value>, key: &str, ctx: &str) -> Result<&'a Value, GraphError> {
    m.get(key)
        .ok_or_else(|| GraphError::Malformed(format!("{ctx}: missing field {key:?}")))
}

fn as_u32(v: &Value, ctx: &str) -> Result<u32, GraphError> {
    v.as_u64()
        .and_then(|x| u32::try_from(x).ok())
        .ok_or_else(|| GraphError::Malformed(format!("{ctx}: expected a non-negative integer")))
}

fn as_str<'a>(v: &'a Value, ctx: &str) -> Result<&'a str, GraphError> {
    v.as_str()
        .ok_or_else(|| GraphError::Malformed(format!("{ctx}: expected a string")))
}

pub fn graph_from_value(value: &Value, v: &Vocab) -> Result<SceneGraph, GraphError> {
    let root = value
        .as_object()
        .ok_or_else(|| GraphError::Malformed("top level must be an object".into()))?;
    let mut g = SceneGraph::default();
    let objects = field(root, "objects", "graph")?
        .as_array()
        .ok_or_else(|| GraphError::Malformed("objects must be an array".into()))?;
    for (i, o) in objects.iter().enumerate() {
        let ctx = format!("objects[{i}]");
        let m = o
            .as_object()
            .ok_or_else(|| GraphError::Malformed(format!("{ctx}: expected an object")))?;
        let id = as_u32(field(m, "id", &ctx)?, &ctx)?;
        let class = as_str(field(m, "class", &ctx)?, &ctx)?;
        let class_id = v.objects.index_of(class).ok_or_else(|| GraphError::UnknownName {
            kind: "object class",
            name: class.to_string(),
        })?;
        let mut attributes = Vec::new();
        if let Some(attrs) = m.get("attributes") {
            let attrs = attrs
                .as_array()
                .ok_or_else(|| GraphError::Malformed(format!("{ctx}: attributes must be an array")))?;
            for a in attrs {
                let name = as_str(a, &ctx)?;
                attributes.push(v.attributes.index_of(name).ok_or_else(|| GraphError::UnknownName {
                    kind: "attribute",
                    name: name.to_string(),
                })?);
            }
        }
        let bbox = match m.get("bbox") {
            None | Some(Value::Null) => None,
            Some(b) => {
                let xs: Vec<f64> = b
                    .as_array()
                    .filter(|a| a.len() == 4)
                    .map(|a| a.iter().filter_map(Value::as_f64).collect())
                    .filter(|xs: &Vec<f64>| xs.len() == 4)
                    .ok_or_else(|| GraphError::Malformed(format!("{ctx}: bbox must be 4 numbers")))?;
                Some(BBox::new(xs[0], xs[1], xs[2], xs[3]))
            }
        };
        g.objects.push(ObjectNode {
            id,
            class_id,
            attributes,
            bbox,
        });
    }
    let relations = field(root, "relations", "graph")?
        .as_array()
        .ok_or_else(|| GraphError::Malformed("relations must be an array".into()))?;
    for (i, r) in relations.iter().enumerate() {
        let ctx = format!("relations[{i}]");
        let m = r
            .as_object()
            .ok_or_else(|| GraphError::Malformed(format!("{ctx}: expected an object")))?;
        let predicate = as_str(field(m, "predicate", &ctx)?, &ctx)?;
        let predicate_id = v.predicates.index_of(predicate).ok_or_else(|| GraphError::UnknownName {
            kind: "predicate",
            name: predicate.to_string(),
        })?;
        g.relations.push(RelationTriple {
            subject_id: as_u32(field(m, "subject", &ctx)?, &ctx)?,
            predicate_id,
            object_id: as_u32(field(m, "object", &ctx)?, &ctx)?,
        });
    }
    if let Some(size) = root.get("image_size") {
        let wh = size
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| GraphError::Malformed("image_size must be [width, height]".into()))?;
        g.image_size = Some((as_u32(&wh[0], "image_size")?, as_u32(&wh[1], "image_size")?));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::from_strs(&["circle", "square"], &["left of", "near"], &["red", "blue"]).unwrap()
    }

    fn two_object_graph() -> SceneGraph {
        SceneGraph {
            objects: vec![
                ObjectNode {
                    id: 0,
                    class_id: 0,
                    attributes: vec![0],
                    bbox: Some(BBox::new(2.0, 3.0, 12.5, 13.0)),
                },
                ObjectNode {
                    id: 1,
                    class_id: 1,
                    attributes: vec![1],
                    bbox: Some(BBox::new(30.0, 3.0, 40.25, 13.0)),
                },
            ],
            relations: vec![RelationTriple {
                subject_id: 0,
                predicate_id: 0,
                object_id: 1,
            }],
            image_size: Some((64, 64)),
        }
    }

    #[test]
    fn empty_graph_is_valid_and_serializes_minimally() {
        let g = SceneGraph::default();
        assert!(validate_graph(&g, &vocab()).is_empty());
        let text = serialize_graph(&g, &vocab());
        assert_eq!(text, r#"{"objects":[],"relations":[]}"#);
        assert_eq!(parse_graph(&text, &vocab()).unwrap(), g);
    }

    #[test]
    fn self_relation_is_reported() {
        let mut g = two_object_graph();
        g.relations.push(RelationTriple {
            subject_id: 1,
            predicate_id: 1,
            object_id: 1,
        });
        let violations = validate_graph(&g, &vocab());
        assert_eq!(violations.len(), 1);
        assert!(matches!(violations[0], Violation::SelfRelation(t) if t.subject_id == 1));
    }

    #[test]
    fn relation_count_above_max_is_one_violation() {
        let v = Vocab::from_strs(&["dot"], &["near"], &["red"]).unwrap();
        let objects = (0..22)
            .map(|id| ObjectNode {
                id,
                class_id: 0,
                attributes: vec![],
                bbox: None,
            })
            .collect();
        let relations = (0..21)
            .map(|i| RelationTriple {
                subject_id: i,
                predicate_id: 0,
                object_id: i + 1,
            })
            .collect();
        let g = SceneGraph {
            objects,
            relations,
            image_size: None,
        };
        let violations = validate_graph_with(&g, &v, 20);
        assert_eq!(violations, vec![Violation::RelationCount { count: 21, max: 20 }]);
        assert!(violations[0].to_string().contains("relation-count"));
    }

    #[test]
    fn two_object_graph_round_trips() {
        let g = two_object_graph();
        let text = serialize_graph(&g, &vocab());
        assert!(text.starts_with(r#"{"image_size":[64,64],"objects":[{"attributes":["red"],"bbox":[2.0000,3.0000,12.5000,13.0000]"#));
        assert_eq!(parse_graph(&text, &vocab()).unwrap(), g);
    }

    #[test]
    fn unknown_predicate_names_the_token() {
        let text = r#"{"objects":[{"id":0,"class":"circle"},{"id":1,"class":"square"}],
            "relations":[{"subject":0,"predicate":"hovering over","object":1}]}"#;
        let err = parse_graph(text, &vocab()).unwrap_err();
        assert!(err.to_string().contains("hovering over"), "{err}");
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = parse_graph("{\"objects\": [\n  {\"id\": 0,,}]}", &vocab()).unwrap_err();
        match err {
            GraphError::Parse { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bbox_geometry() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 5.0, 15.0, 15.0);
        assert_eq!(a.intersection_area(&b), 25.0);
        assert!((a.iou(&b) - 25.0 / 175.0).abs() < 1e-12);
        assert!(BBox::new(2.0, 2.0, 4.0, 4.0).contained_in(&a));
        assert!(!b.contained_in(&a));
    }
}
