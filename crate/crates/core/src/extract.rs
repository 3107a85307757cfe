//! Annotation extraction for generated images.
//!
//! A requested relation survives when both of its objects are found among the
//! detections above the confidence threshold (applied to the objectness and to
//! the class score). Requested nodes are matched to detections greedily in
//! descending class-score order, each detection used at most once.

use crate::detect::Detection;
use crate::graph::{ObjectNode, SceneGraph};

pub const DEFAULT_THRESHOLD: f64 = 0.3;

pub fn extract_annotations(requested: &SceneGraph, detections: &[Detection], threshold: f64) -> SceneGraph {
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (d_idx, d) in detections.iter().enumerate() {
        if d.objectness < threshold || d.class_score < threshold {
            continue;
        }
        for (n_idx, node) in requested.objects.iter().enumerate() {
            if node.class_id == d.class_id {
                candidates.push((n_idx, d_idx));
            }
        }
    }
    candidates.sort_by(|a, b| {
        detections[b.1]
            .class_score
            .total_cmp(&detections[a.1].class_score)
            .then(a.1.cmp(&b.1))
            .then(a.0.cmp(&b.0))
    });

    let mut node_to_det: Vec<Option<usize>> = vec![None; requested.objects.len()];
    let mut det_used = vec![false; detections.len()];
    for (n_idx, d_idx) in candidates {
        if node_to_det[n_idx].is_none() && !det_used[d_idx] {
            node_to_det[n_idx] = Some(d_idx);
            det_used[d_idx] = true;
        }
    }

    let objects: Vec<ObjectNode> = requested
        .objects
        .iter()
        .zip(&node_to_det)
        .filter_map(|(node, det)| {
            det.map(|d| ObjectNode {
                bbox: Some(detections[d].bbox),
                ..node.clone()
            })
        })
        .collect();
    let kept: Vec<u32> = objects.iter().map(|o| o.id).collect();
    let relations = requested
        .relations
        .iter()
        .filter(|t| kept.contains(&t.subject_id) && kept.contains(&t.object_id))
        .copied()
        .collect();
    SceneGraph {
        objects,
        relations,
        image_size: requested.image_size,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BBox, RelationTriple};

    fn node(id: u32, class_id: usize) -> ObjectNode {
        ObjectNode {
            id,
            class_id,
            attributes: vec![],
            bbox: Some(BBox::new(0.0, 0.0, 10.0, 10.0)),
        }
    }

    fn det(class_id: usize, x: f64, score: f64) -> Detection {
        Detection {
            class_id,
            bbox: BBox::new(x, 1.0, x + 8.0, 9.0),
            objectness: 0.9,
            class_score: score,
        }
    }

    fn rel(s: u32, p: usize, o: u32) -> RelationTriple {
        RelationTriple {
            subject_id: s,
            predicate_id: p,
            object_id: o,
        }
    }

    #[test]
    fn all_detected_keeps_graph_with_detector_boxes() {
        let g = SceneGraph {
            objects: vec![node(0, 0), node(1, 1)],
            relations: vec![rel(0, 0, 1)],
            image_size: Some((64, 64)),
        };
        let dets = [det(0, 3.0, 0.8), det(1, 30.0, 0.7)];
        let out = extract_annotations(&g, &dets, DEFAULT_THRESHOLD);
        assert_eq!(out.relations, g.relations);
        assert_eq!(out.objects[0].bbox, Some(dets[0].bbox));
        assert_eq!(out.objects[1].bbox, Some(dets[1].bbox));
    }

    #[test]
    fn threshold_boundary() {
        let g = SceneGraph {
            objects: vec![node(0, 0), node(1, 1)],
            relations: vec![rel(0, 0, 1)],
            image_size: None,
        };
        let kept = extract_annotations(&g, &[det(0, 3.0, 0.9), det(1, 30.0, 0.30)], 0.3);
        assert_eq!(kept.relations.len(), 1);
        let dropped = extract_annotations(&g, &[det(0, 3.0, 0.9), det(1, 30.0, 0.29)], 0.3);
        assert!(dropped.relations.is_empty());
    }

    #[test]
    fn shared_subject_with_one_missing_object() {
        // (a circle, r, b square) and (a circle, r, c star); no star detected
        let g = SceneGraph {
            objects: vec![node(0, 0), node(1, 1), node(2, 2)],
            relations: vec![rel(0, 0, 1), rel(0, 1, 2)],
            image_size: None,
        };
        let dets = [det(0, 3.0, 0.9), det(1, 20.0, 0.8), det(1, 40.0, 0.6)];
        let out = extract_annotations(&g, &dets, 0.3);
        assert_eq!(out.relations, vec![rel(0, 0, 1)]);
        // the square takes the higher-scoring square detection
        assert_eq!(out.object(1).unwrap().bbox, Some(dets[1].bbox));
    }

    #[test]
    fn same_class_endpoints_need_two_detections() {
        let g = SceneGraph {
            objects: vec![node(0, 0), node(1, 0)],
            relations: vec![rel(0, 0, 1)],
            image_size: None,
        };
        assert!(extract_annotations(&g, &[det(0, 3.0, 0.9)], 0.3).relations.is_empty());
        let both = extract_annotations(&g, &[det(0, 3.0, 0.9), det(0, 30.0, 0.5)], 0.3);
        assert_eq!(both.relations.len(), 1);
    }
}
