//! Reader for Visual-Genome-style annotation files.
//!
//! Two JSON arrays, matched by `image_id`:
//!
//! * objects file: `[{"image_id":1, "width":800, "height":600,
//!   "objects":[{"object_id":10, "x":5, "y":6, "w":40, "h":30,
//!   "names":["clock"], "attributes":["green"]}]}]`
//!   (`width`/`height`/`attributes` optional)
//! * relations file: `[{"image_id":1, "relationships":[{"predicate":"on",
//!   "subject":{"object_id":10}, "object":{"object_id":11}}]}]`
//!   (flat `subject_id`/`object_id` keys are accepted too)
//!
//! Names are lowercased and trimmed before vocabulary lookup. Object ids are
//! renumbered per image in file order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::Deserialize;

use crate::error::GraphError;
use crate::graph::{validate_graph_with, BBox, ObjectNode, RelationTriple, SceneGraph, DEFAULT_MAX_RELATIONS};
use crate::vocab::Vocab;

#[derive(Debug, Deserialize)]
struct ObjectsRecord {
    image_id: u64,
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
    objects: Vec<VgObject>,
}

#[derive(Debug, Deserialize)]
struct VgObject {
    object_id: u64,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    #[serde(default)]
    names: Vec<String>,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    attributes: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RelationsRecord {
    image_id: u64,
    relationships: Vec<VgRelation>,
}

#[derive(Debug, Deserialize)]
struct ObjectRef {
    object_id: u64,
}

#[derive(Debug, Deserialize)]
struct VgRelation {
    predicate: String,
    #[serde(default)]
    subject: Option<ObjectRef>,
    #[serde(default)]
    object: Option<ObjectRef>,
    #[serde(default)]
    subject_id: Option<u64>,
    #[serde(default)]
    object_id: Option<u64>,
}

/// Counters for everything the reader dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub records: usize,
    pub graphs: usize,
    pub unknown_object_class: usize,
    pub unknown_attribute: usize,
    pub unknown_predicate: usize,
    pub invalid_bbox: usize,
    pub dangling_relations: usize,
    pub self_relations: usize,
    pub duplicate_triples: usize,
    pub skipped_too_many_relations: usize,
}

#[derive(Debug, Clone)]
pub struct IngestedGraph {
    pub image_id: u64,
    pub graph: SceneGraph,
}

fn normalize(name: &str) -> String {
    name.trim().to_lowercase()
}

fn parse_array<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, GraphError> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(text).map_err(GraphError::from_json)?;
    raw.into_iter()
        .enumerate()
        .map(|(record, v)| {
            serde_json::from_value(v).map_err(|e| GraphError::Format {
                record,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn ingest_vg_split(
    objects_file: &Path,
    relations_file: &Path,
    v: &Vocab,
) -> Result<(Vec<IngestedGraph>, IngestReport), GraphError> {
    let objects = std::fs::read_to_string(objects_file)?;
    let relations = std::fs::read_to_string(relations_file)?;
    ingest_vg_text(&objects, &relations, v)
}

/// Empty or whitespace-only input is treated as an empty array.
pub fn ingest_vg_text(
    objects_text: &str,
    relations_text: &str,
    v: &Vocab,
) -> Result<(Vec<IngestedGraph>, IngestReport), GraphError> {
    let objects: Vec<ObjectsRecord> = if objects_text.trim().is_empty() {
        Vec::new()
    } else {
        parse_array(objects_text)?
    };
    let relations: Vec<RelationsRecord> = if relations_text.trim().is_empty() {
        Vec::new()
    } else {
        parse_array(relations_text)?
    };
    let mut rel_by_image: BTreeMap<u64, Vec<VgRelation>> = BTreeMap::new();
    for r in relations {
        rel_by_image.entry(r.image_id).or_default().extend(r.relationships);
    }

    let mut report = IngestReport::default();
    let mut out = Vec::new();
    for record in objects {
        report.records += 1;
        let image_size = match (record.width, record.height) {
            (Some(w), Some(h)) => Some((w, h)),
            _ => None,
        };
        let mut id_map: HashMap<u64, u32> = HashMap::new();
        let mut g = SceneGraph {
            image_size,
            ..SceneGraph::default()
        };
        for obj in &record.objects {
            let name = obj
                .names
                .first()
                .cloned()
                .or_else(|| obj.name.clone())
                .unwrap_or_default();
            let Some(class_id) = v.objects.index_of(&normalize(&name)) else {
                report.unknown_object_class += 1;
                continue;
            };
            let bbox = BBox::new(obj.x, obj.y, obj.x + obj.w, obj.y + obj.h);
            let in_bounds = image_size.map_or(true, |(w, h)| bbox.within(w, h));
            if !bbox.is_well_formed() || !in_bounds {
                report.invalid_bbox += 1;
                continue;
            }
            if id_map.contains_key(&obj.object_id) {
                continue;
            }
            let mut attributes = Vec::new();
            for a in &obj.attributes {
                match v.attributes.index_of(&normalize(a)) {
                    Some(idx) if !attributes.contains(&idx) => attributes.push(idx),
                    Some(_) => {}
                    None => report.unknown_attribute += 1,
                }
            }
            let id = g.objects.len() as u32;
            id_map.insert(obj.object_id, id);
            g.objects.push(ObjectNode {
                id,
                class_id,
                attributes,
                bbox: Some(bbox),
            });
        }

        let mut seen = HashSet::new();
        for rel in rel_by_image.remove(&record.image_id).unwrap_or_default() {
            let Some(predicate_id) = v.predicates.index_of(&normalize(&rel.predicate)) else {
                report.unknown_predicate += 1;
                continue;
            };
            let s = rel.subject.as_ref().map(|o| o.object_id).or(rel.subject_id);
            let o = rel.object.as_ref().map(|o| o.object_id).or(rel.object_id);
            let (Some(subject_id), Some(object_id)) = (
                s.and_then(|s| id_map.get(&s).copied()),
                o.and_then(|o| id_map.get(&o).copied()),
            ) else {
                report.dangling_relations += 1;
                continue;
            };
            if subject_id == object_id {
                report.self_relations += 1;
                continue;
            }
            let triple = RelationTriple {
                subject_id,
                predicate_id,
                object_id,
            };
            // dedupe after object filtering
            if !seen.insert(triple) {
                report.duplicate_triples += 1;
                continue;
            }
            g.relations.push(triple);
        }

        if g.relations.len() > DEFAULT_MAX_RELATIONS {
            report.skipped_too_many_relations += 1;
            continue;
        }
        debug_assert!(validate_graph_with(&g, v, DEFAULT_MAX_RELATIONS).is_empty());
        report.graphs += 1;
        out.push(IngestedGraph {
            image_id: record.image_id,
            graph: g,
        });
    }
    Ok((out, report))
}
