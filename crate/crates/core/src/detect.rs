//! Object detectors for the shapes world.
//!
//! [`oracle_detect`] perturbs ground-truth boxes and labels. [`PixelDetector`]
//! looks only at pixels: it segments each palette colour into connected
//! components and scores the component silhouette against every shape.

use std::collections::VecDeque;

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{BBox, SceneGraph};
use crate::world::{Shape, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub bbox: BBox,
    pub objectness: f64,
    pub class_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoise {
    /// Std-dev of the Gaussian jitter added to each box coordinate, in pixels.
    pub sigma: f64,
    /// Probability of replacing the label with a different class.
    pub p_confusion: f64,
    /// Lower end of the uniform score range when not in pure-oracle mode.
    pub min_score: f64,
}

impl DetectorNoise {
    pub const PURE: DetectorNoise = DetectorNoise {
        sigma: 0.0,
        p_confusion: 0.0,
        min_score: 1.0,
    };

    pub fn is_pure(&self) -> bool {
        self.sigma == 0.0 && self.p_confusion == 0.0
    }
}

/// Ground truth with jitter, label confusion and sampled scores.
pub fn oracle_detect(
    record: &SceneGraph,
    num_classes: usize,
    noise: &DetectorNoise,
    rng: &mut impl Rng,
) -> Vec<Detection> {
    let (w, h) = record.image_size.unwrap_or((u32::MAX, u32::MAX));
    let (w, h) = (w as f64, h as f64);
    let jitter = Normal::new(0.0, noise.sigma.max(0.0)).expect("finite sigma");
    record
        .objects
        .iter()
        .filter_map(|o| o.bbox.map(|b| (o, b)))
        .map(|(o, b)| {
            if noise.is_pure() {
                return Detection {
                    class_id: o.class_id,
                    bbox: b,
                    objectness: 1.0,
                    class_score: 1.0,
                };
            }
            let mut c = [b.x_min, b.y_min, b.x_max, b.y_max];
            if noise.sigma > 0.0 {
                for v in &mut c {
                    *v += jitter.sample(rng);
                }
            }
            let x0 = c[0].clamp(0.0, w - 1.0);
            let y0 = c[1].clamp(0.0, h - 1.0);
            let x1 = c[2].clamp(x0 + 1.0, w);
            let y1 = c[3].clamp(y0 + 1.0, h);
            let mut class_id = o.class_id;
            if num_classes > 1 && noise.p_confusion > 0.0 && rng.random_bool(noise.p_confusion.min(1.0)) {
                let shift = rng.random_range(1..num_classes);
                class_id = (class_id + shift) % num_classes;
            }
            let lo = noise.min_score.clamp(0.0, 1.0);
            let mut score = || if lo >= 1.0 { 1.0 } else { rng.random_range(lo..=1.0) };
            let objectness = score();
            let class_score = score();
            Detection {
                class_id,
                bbox: BBox::new(x0, y0, x1, y1),
                objectness,
                class_score,
            }
        })
        .collect()
}

/// Silhouette grid resolution used for shape scoring.
pub const SILHOUETTE: usize = 8;

/// Fraction of each grid cell covered by `shape` (4x4 supersampling).
pub fn shape_template(shape: Shape) -> [f64; SILHOUETTE * SILHOUETTE] {
    let mut t = [0.0; SILHOUETTE * SILHOUETTE];
    let sub = 4;
    for gy in 0..SILHOUETTE {
        for gx in 0..SILHOUETTE {
            let mut hits = 0;
            for sy in 0..sub {
                for sx in 0..sub {
                    let u = (gx * sub + sx) as f64 + 0.5;
                    let v = (gy * sub + sy) as f64 + 0.5;
                    let n = (SILHOUETTE * sub) as f64;
                    if shape.covers(u / n, v / n) {
                        hits += 1;
                    }
                }
            }
            t[gy * SILHOUETTE + gx] = hits as f64 / (sub * sub) as f64;
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PixelDetectorConfig {
    /// Max RGB distance for a pixel to count as a palette colour.
    pub color_tolerance: f64,
    pub min_pixels: usize,
    /// Softmax temperature over silhouette distances.
    pub temperature: f64,
}

impl Default for PixelDetectorConfig {
    fn default() -> Self {
        Self {
            color_tolerance: 90.0,
            min_pixels: 20,
            temperature: 0.04,
        }
    }
}

pub struct PixelDetector {
    palette: Vec<[u8; 3]>,
    templates: Vec<[f64; SILHOUETTE * SILHOUETTE]>,
    config: PixelDetectorConfig,
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl PixelDetector {
    pub fn new(spec: &WorldSpec, config: PixelDetectorConfig) -> Self {
        Self {
            palette: spec.colors.iter().map(|c| c.rgb).collect(),
            templates: spec.shapes.iter().map(|&s| shape_template(s)).collect(),
            config,
        }
    }

    /// Class probabilities for a silhouette (softmax of negative mean abs distance).
    pub fn class_scores(&self, silhouette: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .templates
            .iter()
            .map(|t| {
                let d: f64 = t.iter().zip(silhouette).map(|(a, b)| (a - b).abs()).sum::<f64>()
                    / t.len() as f64;
                -d / self.config.temperature
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    pub fn detect(&self, img: &RgbImage) -> Vec<Detection> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        // nearest palette entry within tolerance, per pixel
        let mut label = vec![usize::MAX; w * h];
        let mut closeness = vec![0.0; w * h];
        for (x, y, p) in img.enumerate_pixels() {
            let (best, dist) = self
                .palette
                .iter()
                .enumerate()
                .map(|(i, &c)| (i, color_distance(p.0, c)))
                .fold((usize::MAX, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            if dist <= self.config.color_tolerance {
                let idx = y as usize * w + x as usize;
                label[idx] = best;
                closeness[idx] = 1.0 - dist / self.config.color_tolerance;
            }
        }
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        for start in 0..w * h {
            if seen[start] || label[start] == usize::MAX {
                continue;
            }
            let color = label[start];
            let mut pixels = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(idx) = queue.pop_front() {
                pixels.push(idx);
                let (x, y) = (idx % w, idx / w);
                let mut push = |nx: usize, ny: usize| {
                    let n = ny * w + nx;
                    if !seen[n] && label[n] == color {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                };
                if x > 0 {
                    push(x - 1, y);
                }
                if x + 1 < w {
                    push(x + 1, y);
                }
                if y > 0 {
                    push(x, y - 1);
                }
                if y + 1 < h {
                    push(x, y + 1);
                }
            }
            if pixels.len() < self.config.min_pixels {
                continue;
            }
            let xs = pixels.iter().map(|i| i % w);
            let ys = pixels.iter().map(|i| i / w);
            let (x0, x1) = (xs.clone().min().unwrap(), xs.max().unwrap() + 1);
            let (y0, y1) = (ys.clone().min().unwrap(), ys.max().unwrap() + 1);
            let (bw, bh) = ((x1 - x0) as f64, (y1 - y0) as f64);
            let mut sil = vec![0.0; SILHOUETTE * SILHOUETTE];
            let mut cell_area = vec![0.0; SILHOUETTE * SILHOUETTE];
            // pixel-to-cell area weights: spread each pixel over the grid
            for py in y0..y1 {
                for px in x0..x1 {
                    let gx = (((px - x0) as f64 + 0.5) / bw * SILHOUETTE as f64) as usize;
                    let gy = (((py - y0) as f64 + 0.5) / bh * SILHOUETTE as f64) as usize;
                    let cell = gy.min(SILHOUETTE - 1) * SILHOUETTE + gx.min(SILHOUETTE - 1);
                    cell_area[cell] += 1.0;
                }
            }
            for &idx in &pixels {
                let (px, py) = (idx % w, idx / w);
                let gx = (((px - x0) as f64 + 0.5) / bw * SILHOUETTE as f64) as usize;
                let gy = (((py - y0) as f64 + 0.5) / bh * SILHOUETTE as f64) as usize;
                sil[gy.min(SILHOUETTE - 1) * SILHOUETTE + gx.min(SILHOUETTE - 1)] += 1.0;
            }
            for (s, a) in sil.iter_mut().zip(&cell_area) {
                if *a > 0.0 {
                    *s /= a;
                }
            }
            let scores = self.class_scores(&sil);
            let (class_id, &class_score) = scores
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
            let objectness = pixels.iter().map(|&i| closeness[i]).sum::<f64>() / pixels.len() as f64;
            out.push(Detection {
                class_id,
                bbox: BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64),
                objectness,
                class_score,
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, scene_rng};

    #[test]
    fn pure_oracle_returns_ground_truth() {
        let spec = WorldSpec::default();
        for scene in generate_world(20, &spec, 3) {
            let dets = oracle_detect(&scene.graph, 4, &DetectorNoise::PURE, &mut scene_rng(0, 0));
            assert_eq!(dets.len(), scene.graph.objects.len());
            for (d, o) in dets.iter().zip(&scene.graph.objects) {
                assert_eq!(d.class_id, o.class_id);
                assert_eq!(Some(d.bbox), o.bbox);
                assert_eq!((d.objectness, d.class_score), (1.0, 1.0));
            }
        }
    }

    #[test]
    fn full_confusion_flips_two_class_labels() {
        let spec = WorldSpec {
            shapes: vec![Shape::Circle, Shape::Square],
            ..WorldSpec::default()
        };
        let noise = DetectorNoise {
            sigma: 0.0,
            p_confusion: 1.0,
            min_score: 0.5,
        };
        let mut rng = scene_rng(9, 0);
        for scene in generate_world(50, &spec, 4) {
            for (d, o) in oracle_detect(&scene.graph, 2, &noise, &mut rng).iter().zip(&scene.graph.objects) {
                assert_eq!(d.class_id, 1 - o.class_id);
                assert!((0.5..=1.0).contains(&d.class_score));
            }
        }
    }

    #[test]
    fn jitter_lowers_mean_iou_monotonically() {
        let spec = WorldSpec::default();
        let scenes = generate_world(1000, &spec, 21);
        let mean_iou = |sigma: f64| {
            let noise = DetectorNoise {
                sigma,
                p_confusion: 0.0,
                min_score: 0.3,
            };
            let mut rng = scene_rng(5, 1);
            let (mut total, mut n) = (0.0, 0);
            for s in &scenes {
                for (d, o) in oracle_detect(&s.graph, 4, &noise, &mut rng).iter().zip(&s.graph.objects) {
                    total += d.bbox.iou(&o.bbox.unwrap());
                    n += 1;
                }
            }
            total / n as f64
        };
        let ious: Vec<f64> = [0.0, 0.5, 1.0, 2.0, 4.0].iter().map(|&s| mean_iou(s)).collect();
        assert!(ious.windows(2).all(|w| w[1] < w[0]), "{ious:?}");
    }

    #[test]
    fn pixel_detector_finds_rendered_shapes() {
        let spec = WorldSpec::default();
        let det = PixelDetector::new(&spec, PixelDetectorConfig::default());
        let (mut matched, mut total) = (0, 0);
        for scene in generate_world(200, &spec, 8) {
            let dets = det.detect(&scene.image);
            for o in &scene.graph.objects {
                total += 1;
                let b = o.bbox.unwrap();
                if dets
                    .iter()
                    .any(|d| d.class_id == o.class_id && d.class_score >= 0.3 && d.bbox.iou(&b) >= 0.5)
                {
                    matched += 1;
                }
            }
        }
        let rate = matched as f64 / total as f64;
        assert!(rate > 0.85, "matched {matched}/{total}");
    }
}
