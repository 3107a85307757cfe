//! Recall@K for scene graph generation.
//!
//! Predictions are per ordered object pair, each with one score per predicate.
//! Pairs are ranked by their best predicate score (descending), ties broken by
//! (subject class, predicate, object class) and then input order, and the top
//! K pairs are kept. With the graph constraint each kept pair contributes only
//! its best predicate; without it every predicate of a kept pair is a
//! candidate. Counting K in pairs makes the unconstrained candidate set a
//! superset of the constrained one, so NG recall never falls below recall.
//!
//! A ground-truth triple is hit by a candidate with the same predicate and
//! classes whose boxes both reach the IoU threshold. Hits are counted with a
//! maximum one-to-one matching, so each ground-truth triple and each candidate
//! is used at most once.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::{BBox, SceneGraph};

pub const DEFAULT_IOU: f64 = 0.5;
pub const RECALL_KS: [usize; 3] = [20, 50, 100];

#[derive(Debug, Clone, PartialEq)]
pub struct RelPrediction {
    pub subject_class: usize,
    pub subject_box: BBox,
    pub object_class: usize,
    pub object_box: BBox,
    /// One score per predicate index.
    pub scores: Vec<f64>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("K must be a positive integer")]
    InvalidK,
}

/// A ranked (prediction, predicate, score) entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub prediction: usize,
    pub predicate: usize,
    pub score: f64,
}

fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|b| x > xs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Pairs in rank order, each with its best predicate.
pub fn rank_pairs(predictions: &[RelPrediction]) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = predictions
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            argmax(&p.scores).map(|best| Candidate {
                prediction: i,
                predicate: best,
                score: p.scores[best],
            })
        })
        .collect();
    out.sort_by(|a, b| {
        let (pa, pb) = (&predictions[a.prediction], &predictions[b.prediction]);
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(pa.subject_class.cmp(&pb.subject_class))
            .then(a.predicate.cmp(&b.predicate))
            .then(pa.object_class.cmp(&pb.object_class))
            .then(a.prediction.cmp(&b.prediction))
    });
    out
}

/// Candidates admitted at K.
pub fn top_candidates(predictions: &[RelPrediction], k: usize, graph_constraint: bool) -> Vec<Candidate> {
    let mut pairs = rank_pairs(predictions);
    pairs.truncate(k);
    if graph_constraint {
        return pairs;
    }
    pairs
        .iter()
        .flat_map(|c| {
            predictions[c.prediction]
                .scores
                .iter()
                .enumerate()
                .map(|(pred, &score)| Candidate {
                    prediction: c.prediction,
                    predicate: pred,
                    score,
                })
        })
        .collect()
}

/// Ground-truth triple resolved to classes and boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtTriple {
    pub subject_class: usize,
    pub subject_box: BBox,
    pub predicate: usize,
    pub object_class: usize,
    pub object_box: BBox,
}

/// Triples whose endpoints both have boxes; others cannot be matched and
/// count as misses.
pub fn gt_triples(gt: &SceneGraph) -> Vec<Option<GtTriple>> {
    gt.relations
        .iter()
        .map(|t| {
            let s = gt.object(t.subject_id)?;
            let o = gt.object(t.object_id)?;
            Some(GtTriple {
                subject_class: s.class_id,
                subject_box: s.bbox?,
                predicate: t.predicate_id,
                object_class: o.class_id,
                object_box: o.bbox?,
            })
        })
        .collect()
}

pub fn matches(gt: &GtTriple, p: &RelPrediction, predicate: usize, iou_thresh: f64) -> bool {
    gt.predicate == predicate
        && gt.subject_class == p.subject_class
        && gt.object_class == p.object_class
        && gt.subject_box.iou(&p.subject_box) >= iou_thresh
        && gt.object_box.iou(&p.object_box) >= iou_thresh
}

/// Maximum bipartite matching (augmenting paths). `adj[g]` lists the
/// candidates compatible with ground-truth triple `g`. Returns, per GT, its match.
fn max_matching(adj: &[Vec<usize>], n_right: usize) -> Vec<Option<usize>> {
    fn augment(g: usize, adj: &[Vec<usize>], seen: &mut [bool], right: &mut [Option<usize>]) -> bool {
        for &c in &adj[g] {
            if seen[c] {
                continue;
            }
            seen[c] = true;
            if right[c].is_none_or(|other| augment(other, adj, seen, right)) {
                right[c] = Some(g);
                return true;
            }
        }
        false
    }
    let mut right: Vec<Option<usize>> = vec![None; n_right];
    for g in 0..adj.len() {
        let mut seen = vec![false; n_right];
        augment(g, adj, &mut seen, &mut right);
    }
    let mut left = vec![None; adj.len()];
    for (c, g) in right.iter().enumerate() {
        if let Some(g) = g {
            left[*g] = Some(c);
        }
    }
    left
}

/// Per-GT hit flags for the top-K candidates.
pub fn hit_flags(
    predictions: &[RelPrediction],
    gt: &SceneGraph,
    k: usize,
    graph_constraint: bool,
    iou_thresh: f64,
) -> Result<(Vec<Option<GtTriple>>, Vec<bool>), MetricError> {
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    let top = top_candidates(predictions, k, graph_constraint);
    let gts = gt_triples(gt);
    let adj: Vec<Vec<usize>> = gts
        .iter()
        .map(|g| match g {
            Some(g) => top
                .iter()
                .enumerate()
                .filter(|(_, c)| matches(g, &predictions[c.prediction], c.predicate, iou_thresh))
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        })
        .collect();
    let matched = max_matching(&adj, top.len());
    Ok((gts, matched.iter().map(Option::is_some).collect()))
}

/// hits / |GT| for one image. An image without ground-truth triples scores 0.
pub fn recall_at_k(
    predictions: &[RelPrediction],
    gt: &SceneGraph,
    k: usize,
    graph_constraint: bool,
    iou_thresh: f64,
) -> Result<f64, MetricError> {
    let (_, hits) = hit_flags(predictions, gt, k, graph_constraint, iou_thresh)?;
    if hits.is_empty() {
        return Ok(0.0);
    }
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// One evaluated image: ranked predictions and its ground truth.
pub type EvalSample = (Vec<RelPrediction>, SceneGraph);

/// Mean per-image recall over images that have ground-truth triples.
pub fn dataset_recall(
    samples: &[EvalSample],
    k: usize,
    graph_constraint: bool,
    iou_thresh: f64,
) -> Result<f64, MetricError> {
    let mut total = 0.0;
    let mut n = 0;
    for (preds, gt) in samples {
        if gt.relations.is_empty() {
            continue;
        }
        total += recall_at_k(preds, gt, k, graph_constraint, iou_thresh)?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Recall restricted to each predicate's ground-truth triples, averaged over
/// the images that contain the predicate. Predicates absent from the ground
/// truth are absent from the map.
pub fn per_predicate_recall(
    samples: &[EvalSample],
    k: usize,
    graph_constraint: bool,
    iou_thresh: f64,
) -> Result<BTreeMap<usize, f64>, MetricError> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (preds, gt) in samples {
        let (gts, hits) = hit_flags(preds, gt, k, graph_constraint, iou_thresh)?;
        let mut per_image: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (t, hit) in gt.relations.iter().zip(&hits) {
            let e = per_image.entry(t.predicate_id).or_default();
            e.1 += 1;
            if *hit {
                e.0 += 1;
            }
        }
        debug_assert_eq!(gts.len(), hits.len());
        for (p, (h, n)) in per_image {
            let e = sums.entry(p).or_default();
            e.0 += h as f64 / n as f64;
            e.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(p, (s, n))| (p, s / n as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ObjectNode, RelationTriple};

    fn b(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0)
    }

    fn gt_graph(triples: &[(usize, usize, usize)]) -> SceneGraph {
        // object i has class i and box b(20 i)
        let n = triples.iter().map(|t| t.0.max(t.2)).max().unwrap_or(0) + 1;
        SceneGraph {
            objects: (0..n)
                .map(|i| ObjectNode {
                    id: i as u32,
                    class_id: i,
                    attributes: vec![],
                    bbox: Some(b(20.0 * i as f64)),
                })
                .collect(),
            relations: triples
                .iter()
                .map(|&(s, p, o)| RelationTriple {
                    subject_id: s as u32,
                    predicate_id: p,
                    object_id: o as u32,
                })
                .collect(),
            image_size: None,
        }
    }

    fn pred(s: usize, o: usize, scores: Vec<f64>) -> RelPrediction {
        RelPrediction {
            subject_class: s,
            subject_box: b(20.0 * s as f64),
            object_class: o,
            object_box: b(20.0 * o as f64),
            scores,
        }
    }

    #[test]
    fn perfect_predictions_reach_one() {
        let gt = gt_graph(&[(0, 1, 1), (1, 0, 2)]);
        let preds = vec![pred(0, 1, vec![0.1, 0.9]), pred(1, 2, vec![0.8, 0.1])];
        assert_eq!(recall_at_k(&preds, &gt, 2, true, DEFAULT_IOU).unwrap(), 1.0);
        assert_eq!(recall_at_k(&preds, &gt, 20, false, DEFAULT_IOU).unwrap(), 1.0);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let gt = gt_graph(&[(0, 1, 1)]);
        assert_eq!(recall_at_k(&[], &gt, 20, true, DEFAULT_IOU).unwrap(), 0.0);
    }

    #[test]
    fn zero_k_is_rejected() {
        let gt = gt_graph(&[(0, 1, 1)]);
        assert_eq!(recall_at_k(&[], &gt, 0, true, DEFAULT_IOU), Err(MetricError::InvalidK));
    }

    #[test]
    fn graph_constraint_keeps_one_predicate_per_pair() {
        let gt = gt_graph(&[(0, 1, 1)]);
        let preds = vec![pred(0, 1, vec![0.6, 0.4])];
        assert_eq!(recall_at_k(&preds, &gt, 5, true, DEFAULT_IOU).unwrap(), 0.0);
        assert_eq!(recall_at_k(&preds, &gt, 5, false, DEFAULT_IOU).unwrap(), 1.0);
    }

    #[test]
    fn low_iou_is_a_miss() {
        let gt = gt_graph(&[(0, 0, 1)]);
        let mut p = pred(0, 1, vec![1.0]);
        p.subject_box = BBox::new(6.0, 0.0, 16.0, 10.0);
        assert_eq!(recall_at_k(&[p], &gt, 5, true, DEFAULT_IOU).unwrap(), 0.0);
    }

    #[test]
    fn ties_break_on_classes_then_predicate() {
        let preds = vec![pred(2, 0, vec![0.5, 0.5]), pred(1, 0, vec![0.2, 0.5]), pred(1, 0, vec![0.5, 0.1])];
        let order: Vec<(usize, usize)> = rank_pairs(&preds).iter().map(|c| (c.prediction, c.predicate)).collect();
        assert_eq!(order, vec![(2, 0), (1, 1), (0, 0)]);
    }

    #[test]
    fn unconstrained_k_counts_pairs() {
        let preds = vec![pred(0, 1, vec![0.8, 0.7]), pred(1, 2, vec![0.6, 0.0])];
        assert_eq!(top_candidates(&preds, 1, true).len(), 1);
        assert_eq!(top_candidates(&preds, 1, false).len(), 2);
        assert_eq!(top_candidates(&preds, 2, false).len(), 4);
    }

    #[test]
    fn per_predicate_omits_absent_predicates() {
        let gt = gt_graph(&[(0, 1, 1), (1, 1, 2), (0, 0, 2)]);
        let preds = vec![pred(0, 1, vec![0.0, 1.0]), pred(1, 2, vec![0.0, 1.0]), pred(0, 2, vec![0.0, 0.1, 0.9])];
        let map = per_predicate_recall(&[(preds, gt)], 100, true, DEFAULT_IOU).unwrap();
        assert_eq!(map.get(&1), Some(&1.0));
        assert_eq!(map.get(&0), Some(&0.0));
        assert_eq!(map.get(&2), None);
    }
}
