//! Dataset filtering, applied in a fixed order:
//!
//! 1. image smaller than `min_image_side` in width or height
//! 2. any box smaller than `min_bbox_side` in width or height
//! 3. object classes seen fewer than `min_object_freq` times and attributes
//!    seen fewer than `min_attribute_freq` times are stripped (objects take
//!    their relations with them)
//! 4. records left without relations or objects
//! 5. more than `max_relations` relations
//! 6. caption longer than `max_caption_tokens`
//!
//! Stripping in step 3 can push another class below its threshold once later
//! steps have removed records, so the whole pass repeats until nothing changes.
//! That makes the filter idempotent.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::caption::build_caption_with;
use crate::manifest::DatasetManifest;
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterPolicy {
    pub min_image_side: u32,
    pub min_bbox_side: f64,
    pub min_object_freq: usize,
    pub min_attribute_freq: usize,
    pub max_relations: usize,
    pub max_caption_tokens: usize,
}

impl FilterPolicy {
    /// Thresholds as used on full-size annotation data.
    pub fn full_scale() -> Self {
        Self {
            min_image_side: 500,
            min_bbox_side: 32.0,
            min_object_freq: 3,
            min_attribute_freq: 10,
            max_relations: 20,
            max_caption_tokens: 77,
        }
    }

    /// Desk-scale defaults for 64x64 images (sizes scaled, counts kept).
    pub fn toy() -> Self {
        Self {
            min_image_side: 48,
            min_bbox_side: 6.0,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.min_image_side == 0
            || self.min_bbox_side <= 0.0
            || self.min_object_freq == 0
            || self.min_attribute_freq == 0
            || self.max_relations == 0
            || self.max_caption_tokens == 0
        {
            return Err("filter thresholds must be positive".into());
        }
        Ok(())
    }
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self::toy()
    }
}

/// Removal counts per criterion, in application order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_records: usize,
    pub image_size: usize,
    pub bbox_size: usize,
    pub rare_object_instances: usize,
    pub rare_attribute_instances: usize,
    pub no_relations: usize,
    pub too_many_relations: usize,
    pub caption_too_long: usize,
    pub kept: usize,
    pub passes: usize,
}

fn single_pass(m: &DatasetManifest, p: &FilterPolicy, v: &Vocab, report: &mut FilterReport) -> DatasetManifest {
    let mut records = Vec::with_capacity(m.records.len());
    for r in &m.records {
        if let Some((w, h)) = r.graph.image_size {
            if w < p.min_image_side || h < p.min_image_side {
                report.image_size += 1;
                continue;
            }
        }
        let small_box = r.graph.objects.iter().any(|o| {
            o.bbox
                .is_some_and(|b| b.width() < p.min_bbox_side || b.height() < p.min_bbox_side)
        });
        if small_box {
            report.bbox_size += 1;
            continue;
        }
        records.push(r.clone());
    }

    let mut object_freq: HashMap<usize, usize> = HashMap::new();
    let mut attr_freq: HashMap<usize, usize> = HashMap::new();
    for r in &records {
        for o in &r.graph.objects {
            *object_freq.entry(o.class_id).or_default() += 1;
            for &a in &o.attributes {
                *attr_freq.entry(a).or_default() += 1;
            }
        }
    }
    for r in &mut records {
        let g = &mut r.graph;
        let before = g.objects.len();
        g.objects.retain(|o| object_freq[&o.class_id] >= p.min_object_freq);
        report.rare_object_instances += before - g.objects.len();
        let ids: Vec<u32> = g.objects.iter().map(|o| o.id).collect();
        g.relations
            .retain(|t| ids.contains(&t.subject_id) && ids.contains(&t.object_id));
        for o in &mut g.objects {
            let before = o.attributes.len();
            o.attributes.retain(|a| attr_freq[a] >= p.min_attribute_freq);
            report.rare_attribute_instances += before - o.attributes.len();
        }
    }

    let mut out = Vec::with_capacity(records.len());
    for mut r in records {
        if r.graph.relations.is_empty() || r.graph.objects.is_empty() {
            report.no_relations += 1;
            continue;
        }
        if r.graph.relations.len() > p.max_relations {
            report.too_many_relations += 1;
            continue;
        }
        match build_caption_with(&r.graph, v, p.max_caption_tokens) {
            Ok(c) => r.caption = c,
            Err(_) => {
                report.caption_too_long += 1;
                continue;
            }
        }
        out.push(r);
    }
    DatasetManifest { records: out }
}

pub fn apply_filters(m: &DatasetManifest, p: &FilterPolicy, v: &Vocab) -> (DatasetManifest, FilterReport) {
    let mut report = FilterReport {
        input_records: m.len(),
        ..FilterReport::default()
    };
    let mut current = m.clone();
    loop {
        report.passes += 1;
        let next = single_pass(&current, p, v, &mut report);
        if next == current {
            break;
        }
        current = next;
    }
    report.kept = current.len();
    (current, report)
}
