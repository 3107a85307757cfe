//! Procedural world of coloured shapes with exactly known scene graphs.
//!
//! Every relation is a deterministic function of the object boxes, so the
//! ground truth of any rendered scene can be re-derived from its layout.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{BBox, ObjectNode, RelationTriple, SceneGraph};
use crate::vocab::Vocab;

pub const PREDICATES: [&str; 8] = [
    "left of",
    "right of",
    "above",
    "below",
    "inside",
    "overlapping",
    "larger than",
    "near",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
    Diamond,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
            Shape::Diamond => "diamond",
        }
    }

    /// Coverage test in box-normalized coordinates `u, v` in `[0, 1]`.
    pub fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => true,
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
            Shape::Diamond => (u - 0.5).abs() + (v - 0.5).abs() <= 0.5,
            Shape::Star => star_covers(u, v),
        }
    }
}

fn star_covers(u: f64, v: f64) -> bool {
    let (cx, cy) = (0.5, 0.52);
    let pts: Vec<(f64, f64)> = (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { 0.5 } else { 0.22 };
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    // even-odd rule
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub image_size: u32,
    pub shapes: Vec<Shape>,
    pub colors: Vec<NamedColor>,
    pub background: [u8; 3],
    /// Side length ranges (inclusive) for the `small` and `large` attributes.
    pub small_side: (u32, u32),
    pub large_side: (u32, u32),
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability of placing a small object inside an existing large one.
    pub nest_prob: f64,
    /// Fractions of the image width used by the predicate definitions.
    pub direction_margin: f64,
    pub near_radius: f64,
    pub larger_ratio: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        let color = |name: &str, rgb: [u8; 3]| NamedColor {
            name: name.to_string(),
            rgb,
        };
        Self {
            image_size: 64,
            shapes: vec![Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star],
            colors: vec![
                color("red", [220, 40, 40]),
                color("green", [40, 200, 60]),
                color("blue", [50, 80, 230]),
                color("yellow", [235, 220, 50]),
                color("white", [240, 240, 240]),
            ],
            background: [20, 20, 20],
            small_side: (8, 13),
            large_side: (16, 26),
            min_objects: 2,
            max_objects: 4,
            nest_prob: 0.25,
            direction_margin: 0.1,
            near_radius: 0.25,
            larger_ratio: 3.0,
        }
    }
}

impl WorldSpec {
    /// "Real-scale" reference resolution.
    pub fn reference_scale() -> Self {
        Self {
            image_size: 128,
            small_side: (16, 26),
            large_side: (32, 52),
            ..Self::default()
        }
    }

    pub fn vocab(&self) -> Vocab {
        let objects = self.shapes.iter().map(|s| s.name().to_string()).collect();
        let predicates = PREDICATES.iter().map(|p| p.to_string()).collect();
        let mut attributes: Vec<String> = self.colors.iter().map(|c| c.name.clone()).collect();
        attributes.push("small".into());
        attributes.push("large".into());
        Vocab::new(objects, predicates, attributes).expect("world vocabulary is well formed")
    }

    pub fn small_attr(&self) -> usize {
        self.colors.len()
    }

    pub fn large_attr(&self) -> usize {
        self.colors.len() + 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err("world needs at least one shape and one color".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err("invalid object count range".into());
        }
        if self.max_objects > self.colors.len() {
            return Err("every object in a scene needs its own color".into());
        }
        if self.large_side.1 >= self.image_size || self.small_side.0 == 0 {
            return Err("object sizes do not fit the image".into());
        }
        Ok(())
    }

    /// Attribute index of the color of an object node, if any.
    pub fn color_of(&self, node: &ObjectNode) -> Option<usize> {
        node.attributes.iter().copied().find(|&a| a < self.colors.len())
    }
}

fn pred(name: &str) -> usize {
    PREDICATES.iter().position(|p| *p == name).expect("known predicate")
}

/// Geometric truth of `subject predicate object` for the world predicates.
pub fn predicate_holds(spec: &WorldSpec, predicate: usize, s: &BBox, o: &BBox) -> bool {
    let w = spec.image_size as f64;
    let (sx, sy) = s.center();
    let (ox, oy) = o.center();
    let margin = spec.direction_margin * w;
    let intersects = s.intersection_area(o) > 0.0;
    match PREDICATES.get(predicate).copied() {
        Some("left of") => sx < ox - margin,
        Some("right of") => sx > ox + margin,
        Some("above") => sy < oy - margin,
        Some("below") => sy > oy + margin,
        Some("inside") => s.contained_in(o) && s.area() < o.area(),
        Some("overlapping") => intersects && !s.contained_in(o) && !o.contained_in(s),
        Some("larger than") => s.area() >= spec.larger_ratio * o.area(),
        Some("near") => !intersects && ((sx - ox).powi(2) + (sy - oy).powi(2)).sqrt() < spec.near_radius * w,
        _ => false,
    }
}

/// The single annotated relation for an unordered pair, if any.
///
/// Priority: inside, overlapping, larger than, near, then the dominant
/// direction. The subject is the smaller object except for "larger than".
pub fn pair_relation(spec: &WorldSpec, a: &ObjectNode, b: &ObjectNode) -> Option<RelationTriple> {
    let (ba, bb) = (a.bbox?, b.bbox?);
    let (small, big, sb, bbx) = if ba.area() <= bb.area() {
        (a, b, ba, bb)
    } else {
        (b, a, bb, ba)
    };
    let triple = |s: &ObjectNode, p: usize, o: &ObjectNode| RelationTriple {
        subject_id: s.id,
        predicate_id: p,
        object_id: o.id,
    };
    if predicate_holds(spec, pred("inside"), &sb, &bbx) {
        return Some(triple(small, pred("inside"), big));
    }
    if predicate_holds(spec, pred("overlapping"), &sb, &bbx) {
        return Some(triple(small, pred("overlapping"), big));
    }
    if predicate_holds(spec, pred("larger than"), &bbx, &sb) {
        return Some(triple(big, pred("larger than"), small));
    }
    if predicate_holds(spec, pred("near"), &sb, &bbx) {
        return Some(triple(small, pred("near"), big));
    }
    let (sx, sy) = sb.center();
    let (bx, by) = bbx.center();
    let candidates: [&str; 2] = if (sx - bx).abs() >= (sy - by).abs() {
        ["left of", "right of"]
    } else {
        ["above", "below"]
    };
    candidates
        .iter()
        .map(|name| pred(name))
        .find(|&p| predicate_holds(spec, p, &sb, &bbx))
        .map(|p| triple(small, p, big))
}

/// Relations of a layout: one per unordered pair, pairs in object order.
pub fn derive_relations(spec: &WorldSpec, objects: &[ObjectNode]) -> Vec<RelationTriple> {
    let mut out = Vec::new();
    for i in 0..objects.len() {
        for j in (i + 1)..objects.len() {
            if let Some(t) = pair_relation(spec, &objects[i], &objects[j]) {
                out.push(t);
            }
        }
    }
    out
}

/// Per-scene RNG: one ChaCha stream per scene index.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn random_layout(spec: &WorldSpec, rng: &mut impl Rng) -> SceneGraph {
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let size = spec.image_size;
    let mut colors: Vec<usize> = (0..spec.colors.len()).collect();
    colors.shuffle(rng);
    let mut objects: Vec<ObjectNode> = Vec::with_capacity(n);
    for id in 0..n {
        let shape = rng.random_range(0..spec.shapes.len());
        let large_hosts: Vec<BBox> = objects
            .iter()
            .filter_map(|o| o.bbox)
            .filter(|b| b.width() >= spec.small_side.0 as f64 + 6.0)
            .collect();
        let nest = !large_hosts.is_empty() && rng.random_bool(spec.nest_prob);
        let (side, x0, y0, large) = if nest {
            let host = large_hosts[rng.random_range(0..large_hosts.len())];
            let max_side = (host.width() as u32 - 4).min(spec.small_side.1);
            let side = rng.random_range(spec.small_side.0..=max_side.max(spec.small_side.0));
            let free = host.width() as u32 - side;
            let x0 = host.x_min as u32 + rng.random_range(0..=free);
            let y0 = host.y_min as u32 + rng.random_range(0..=free);
            (side, x0, y0, false)
        } else {
            let large = rng.random_bool(0.5);
            let (lo, hi) = if large { spec.large_side } else { spec.small_side };
            let side = rng.random_range(lo..=hi);
            let x0 = rng.random_range(0..=size - side);
            let y0 = rng.random_range(0..=size - side);
            (side, x0, y0, large)
        };
        let size_attr = if large { spec.large_attr() } else { spec.small_attr() };
        objects.push(ObjectNode {
            id: id as u32,
            class_id: shape,
            attributes: vec![colors[id], size_attr],
            bbox: Some(BBox::new(
                x0 as f64,
                y0 as f64,
                (x0 + side) as f64,
                (y0 + side) as f64,
            )),
        });
    }
    let relations = derive_relations(spec, &objects);
    SceneGraph {
        objects,
        relations,
        image_size: Some((size, size)),
    }
}

/// Layouts only (no pixels); scene `i` depends only on `(seed, i)`.
pub fn generate_layouts(n: usize, spec: &WorldSpec, seed: u64) -> Vec<SceneGraph> {
    (0..n)
        .map(|i| random_layout(spec, &mut scene_rng(seed, i as u64)))
        .collect()
}

/// Draws objects largest first so nested objects stay visible.
pub fn render(spec: &WorldSpec, g: &SceneGraph) -> RgbImage {
    let (w, h) = g.image_size.unwrap_or((spec.image_size, spec.image_size));
    let mut img = RgbImage::from_pixel(w, h, Rgb(spec.background));
    let mut order: Vec<&ObjectNode> = g.objects.iter().filter(|o| o.bbox.is_some()).collect();
    order.sort_by(|a, b| {
        let (aa, ba) = (a.bbox.unwrap().area(), b.bbox.unwrap().area());
        ba.partial_cmp(&aa).unwrap().then(a.id.cmp(&b.id))
    });
    for obj in order {
        let b = obj.bbox.unwrap();
        let shape = spec.shapes[obj.class_id];
        let rgb = spec.color_of(obj).map_or([128, 128, 128], |c| spec.colors[c].rgb);
        let (x0, y0) = (b.x_min.floor().max(0.0) as u32, b.y_min.floor().max(0.0) as u32);
        let (x1, y1) = (b.x_max.ceil().min(w as f64) as u32, b.y_max.ceil().min(h as f64) as u32);
        for py in y0..y1 {
            for px in x0..x1 {
                let u = (px as f64 + 0.5 - b.x_min) / b.width();
                let v = (py as f64 + 0.5 - b.y_min) / b.height();
                if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && shape.covers(u, v) {
                    img.put_pixel(px, py, Rgb(rgb));
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub graph: SceneGraph,
    pub image: RgbImage,
}

pub fn generate_world(n: usize, spec: &WorldSpec, seed: u64) -> Vec<Scene> {
    generate_layouts(n, spec, seed)
        .into_iter()
        .map(|graph| Scene {
            image: render(spec, &graph),
            graph,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_graph;

    fn node(id: u32, class_id: usize, bbox: BBox) -> ObjectNode {
        ObjectNode {
            id,
            class_id,
            attributes: vec![0],
            bbox: Some(bbox),
        }
    }

    #[test]
    fn circle_left_of_square() {
        let spec = WorldSpec::default();
        let objects = vec![
            node(0, 0, BBox::new(4.0, 20.0, 16.0, 32.0)),
            node(1, 1, BBox::new(40.0, 20.0, 53.0, 33.0)),
        ];
        let rels = derive_relations(&spec, &objects);
        assert_eq!(
            rels,
            vec![RelationTriple {
                subject_id: 0,
                predicate_id: pred("left of"),
                object_id: 1
            }]
        );
        assert!(!rels.iter().any(|t| t.subject_id == 1 && t.predicate_id == pred("right of")));
    }

    #[test]
    fn single_object_has_no_relations() {
        let spec = WorldSpec::default();
        let objects = vec![node(0, 0, BBox::new(4.0, 4.0, 16.0, 16.0))];
        assert!(derive_relations(&spec, &objects).is_empty());
    }

    #[test]
    fn nested_and_sized_relations() {
        let spec = WorldSpec::default();
        let outer = node(0, 1, BBox::new(10.0, 10.0, 36.0, 36.0));
        let inner = node(1, 0, BBox::new(14.0, 14.0, 24.0, 24.0));
        let t = pair_relation(&spec, &outer, &inner).unwrap();
        assert_eq!((t.subject_id, t.predicate_id, t.object_id), (1, pred("inside"), 0));
        let far_small = node(2, 0, BBox::new(50.0, 50.0, 58.0, 58.0));
        let t = pair_relation(&spec, &outer, &far_small).unwrap();
        assert_eq!((t.subject_id, t.predicate_id), (0, pred("larger than")));
    }

    #[test]
    fn world_is_sound_and_deterministic() {
        let spec = WorldSpec::default();
        let v = spec.vocab();
        let scenes = generate_world(200, &spec, 11);
        let mut seen = [0usize; 8];
        for s in &scenes {
            assert!(validate_graph(&s.graph, &v).is_empty());
            assert_eq!(derive_relations(&spec, &s.graph.objects), s.graph.relations);
            for t in &s.graph.relations {
                let sb = s.graph.object(t.subject_id).unwrap().bbox.unwrap();
                let ob = s.graph.object(t.object_id).unwrap().bbox.unwrap();
                assert!(predicate_holds(&spec, t.predicate_id, &sb, &ob));
                seen[t.predicate_id] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c > 0), "every predicate occurs: {seen:?}");
        let again = generate_world(200, &spec, 11);
        assert!(scenes.iter().zip(&again).all(|(a, b)| a.graph == b.graph && a.image == b.image));
    }

    #[test]
    fn render_draws_shape_colors() {
        let spec = WorldSpec::default();
        let g = SceneGraph {
            objects: vec![node(0, 1, BBox::new(8.0, 8.0, 20.0, 20.0))],
            relations: vec![],
            image_size: Some((64, 64)),
        };
        let img = render(&spec, &g);
        assert_eq!(img.get_pixel(10, 10).0, spec.colors[0].rgb);
        assert_eq!(img.get_pixel(30, 30).0, spec.background);
    }
}
