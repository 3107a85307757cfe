//! Two-stage scene graph model for given boxes.
//!
//! Stage one classifies each box from an 8×8 colour thumbnail of its crop.
//! Stage two scores every ordered pair from box geometry and the two class
//! embeddings, plus a log-frequency bias P(predicate | subject class, object
//! class) estimated from the training pairs. The last logit is "no relation".
//!
//! Debiased scores use the total direct effect: the same classifier is run a
//! second time with the geometry replaced by its training mean, which keeps
//! the class-pair context and the frequency bias, and the two logit vectors
//! are subtracted.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use nesyaug_core::graph::BBox;
use nesyaug_core::metrics::{dataset_recall, per_predicate_recall, EvalSample, RelPrediction, DEFAULT_IOU, RECALL_KS};
use nesyaug_core::report::EvalMetrics;
use nesyaug_core::tde::{tde_scores, TdeInputs};
use nesyaug_core::{SceneGraph, Vocab};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Init, Linear};
use crate::params::{CheckpointMeta, ParamStore};
use crate::{ModelError, Result};

pub const CROP: usize = 8;
pub const OBJ_DIM: usize = 3 * CROP * CROP + 2;
pub const GEOM_DIM: usize = 17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SggHyper {
    pub hidden: usize,
    pub class_dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SggHyper {
    fn default() -> Self {
        Self {
            hidden: 64,
            class_dim: 16,
            epochs: 30,
            batch: 128,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// A training or test image with boxed objects.
#[derive(Debug, Clone, PartialEq)]
pub struct SggExample {
    pub image: RgbImage,
    pub graph: SceneGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Softmax of the full logits.
    Plain,
    /// Softmax of the total direct effect.
    Tde,
}

/// Area-averaged 8×8 RGB thumbnail of the box (centred on 0) and its size.
pub fn crop_features(img: &RgbImage, b: &BBox) -> [f32; OBJ_DIM] {
    let (w, h) = img.dimensions();
    let x0 = (b.x_min.floor().max(0.0) as u32).min(w - 1);
    let y0 = (b.y_min.floor().max(0.0) as u32).min(h - 1);
    let x1 = (b.x_max.ceil() as u32).clamp(x0 + 1, w);
    let y1 = (b.y_max.ceil() as u32).clamp(y0 + 1, h);
    let (cw, chh) = ((x1 - x0) as usize, (y1 - y0) as usize);
    let mut sums = [0f64; 3 * CROP * CROP];
    let mut counts = [0usize; CROP * CROP];
    for y in y0..y1 {
        for x in x0..x1 {
            let cx = (x - x0) as usize * CROP / cw;
            let cy = (y - y0) as usize * CROP / chh;
            let cell = cy * CROP + cx;
            counts[cell] += 1;
            let p = img.get_pixel(x, y);
            for c in 0..3 {
                sums[c * CROP * CROP + cell] += p[c] as f64;
            }
        }
    }
    let mut out = [0f32; OBJ_DIM];
    for c in 0..3 {
        for cell in 0..CROP * CROP {
            let n = counts[cell].max(1) as f64;
            out[c * CROP * CROP + cell] = (sums[c * CROP * CROP + cell] / n / 255.0 - 0.5) as f32;
        }
    }
    out[3 * CROP * CROP] = (b.width() / w as f64) as f32;
    out[3 * CROP * CROP + 1] = (b.height() / h as f64) as f32;
    out
}

/// Relative geometry of an ordered pair, normalised by the image size.
pub fn pair_geometry(s: &BBox, o: &BBox, w: f64, h: f64) -> [f32; GEOM_DIM] {
    let (scx, scy) = s.center();
    let (ocx, ocy) = o.center();
    let inter = s.intersection_area(o);
    let eps = 1e-6;
    let g = [
        s.x_min / w,
        s.y_min / h,
        s.x_max / w,
        s.y_max / h,
        o.x_min / w,
        o.y_min / h,
        o.x_max / w,
        o.y_max / h,
        (ocx - scx) / w,
        (ocy - scy) / h,
        ((s.width() + eps) / (o.width() + eps)).ln(),
        ((s.height() + eps) / (o.height() + eps)).ln(),
        ((s.area() + eps) / (o.area() + eps)).ln(),
        s.iou(o),
        inter / (s.area() + eps),
        inter / (o.area() + eps),
        ((ocx - scx).hypot(ocy - scy)) / w,
    ];
    g.map(|x| x as f32)
}

struct PairData {
    geom: Vec<f32>,
    subj: Vec<u32>,
    obj: Vec<u32>,
    label: Vec<u32>,
}

struct ObjectData {
    feats: Vec<f32>,
    label: Vec<u32>,
}

fn boxes_of(g: &SceneGraph) -> Result<Vec<BBox>> {
    g.objects
        .iter()
        .map(|o| o.bbox.ok_or_else(|| ModelError::Shape(format!("object {} has no box", o.id))))
        .collect()
}

fn collect(data: &[SggExample], num_classes: usize, num_predicates: usize) -> Result<(ObjectData, PairData)> {
    let mut objects = ObjectData {
        feats: Vec::new(),
        label: Vec::new(),
    };
    let mut pairs = PairData {
        geom: Vec::new(),
        subj: Vec::new(),
        obj: Vec::new(),
        label: Vec::new(),
    };
    for ex in data {
        let boxes = boxes_of(&ex.graph)?;
        let (w, h) = ex.image.dimensions();
        for (o, b) in ex.graph.objects.iter().zip(&boxes) {
            if o.class_id >= num_classes {
                return Err(ModelError::VocabMismatch(format!("object class {}", o.class_id)));
            }
            objects.feats.extend(crop_features(&ex.image, b));
            objects.label.push(o.class_id as u32);
        }
        for (i, s) in ex.graph.objects.iter().enumerate() {
            for (j, o) in ex.graph.objects.iter().enumerate() {
                if i == j {
                    continue;
                }
                let label = ex
                    .graph
                    .relations
                    .iter()
                    .find(|t| t.subject_id == s.id && t.object_id == o.id)
                    .map(|t| t.predicate_id)
                    .unwrap_or(num_predicates);
                if label > num_predicates {
                    return Err(ModelError::VocabMismatch(format!("predicate {label}")));
                }
                pairs.geom.extend(pair_geometry(&boxes[i], &boxes[j], w as f64, h as f64));
                pairs.subj.push(s.class_id as u32);
                pairs.obj.push(o.class_id as u32);
                pairs.label.push(label as u32);
            }
        }
    }
    Ok((objects, pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SggTrainStats {
    pub initial_relation_loss: f64,
    pub final_relation_loss: f64,
    pub initial_object_loss: f64,
    pub final_object_loss: f64,
    pub objects: usize,
    pub pairs: usize,
}

pub struct SggModel {
    hyper: SggHyper,
    num_classes: usize,
    num_predicates: usize,
    ps: ParamStore,
    obj1: Linear,
    obj2: Linear,
    class_emb: Tensor,
    rel1: Linear,
    rel2: Linear,
    /// (C·C, P+1) log-probabilities.
    freq_log: Tensor,
    /// (GEOM_DIM,)
    geom_mean: Tensor,
    object_params: Vec<String>,
    relation_params: Vec<String>,
}

impl SggModel {
    fn build(
        num_classes: usize,
        num_predicates: usize,
        hyper: SggHyper,
        freq: Vec<f64>,
        geom_mean: Vec<f64>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut ps = ParamStore::new(DType::F32);
        let h = hyper.hidden;
        let obj1 = Linear::new(&mut ps, "obj.l1", OBJ_DIM, h, true, Init::FanIn, &mut rng)?;
        let obj2 = Linear::new(&mut ps, "obj.l2", h, num_classes, true, Init::FanIn, &mut rng)?;
        let class_emb = ps.normal("rel.class_emb", &[num_classes, hyper.class_dim], 1.0, &mut rng)?;
        let rel_in = GEOM_DIM + 2 * hyper.class_dim;
        let rel1 = Linear::new(&mut ps, "rel.l1", rel_in, h, true, Init::FanIn, &mut rng)?;
        let rel2 = Linear::new(&mut ps, "rel.l2", h, num_predicates + 1, true, Init::FanIn, &mut rng)?;
        let freq_log = ps.from_values(
            "rel.freq_log",
            freq.iter().map(|p| p.ln()).collect(),
            &[num_classes * num_classes, num_predicates + 1],
        )?;
        let geom_mean = ps.from_values("rel.geom_mean", geom_mean, &[GEOM_DIM])?;
        let names = ps.names();
        let object_params = names.iter().filter(|n| n.starts_with("obj.")).map(|s| s.to_string()).collect();
        let relation_params = ["rel.class_emb", "rel.l1.weight", "rel.l1.bias", "rel.l2.weight", "rel.l2.bias"]
            .map(String::from)
            .to_vec();
        Ok(Self {
            hyper,
            num_classes,
            num_predicates,
            ps,
            obj1,
            obj2,
            class_emb,
            rel1,
            rel2,
            freq_log,
            geom_mean,
            object_params,
            relation_params,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_predicates(&self) -> usize {
        self.num_predicates
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    /// P(predicate or none | subject class, object class); one row per class pair.
    pub fn frequency_table(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .freq_log
            .exp()?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?)
    }

    fn object_logits(&self, feats: &Tensor) -> Result<Tensor> {
        self.obj2.forward(&self.obj1.forward(feats)?.relu()?)
    }

    /// (M, P+1) logits for pairs; with `counterfactual` the geometry is
    /// replaced by the training mean.
    fn relation_logits(&self, geom: &Tensor, subj: &Tensor, obj: &Tensor, counterfactual: bool) -> Result<Tensor> {
        let m = geom.dim(0)?;
        let geom = if counterfactual {
            self.geom_mean.unsqueeze(0)?.broadcast_as((m, GEOM_DIM))?.contiguous()?
        } else {
            geom.clone()
        };
        let x = Tensor::cat(
            &[geom, self.class_emb.index_select(subj, 0)?, self.class_emb.index_select(obj, 0)?],
            1,
        )?;
        let logits = self.rel2.forward(&self.rel1.forward(&x)?.relu()?)?;
        let pair = ((subj * self.num_classes as f64)? + obj)?;
        Ok((logits + self.freq_log.index_select(&pair, 0)?)?)
    }

    fn relation_loss_on(&self, pairs: &PairData, idx: &[usize]) -> Result<Tensor> {
        let (geom, subj, obj, label) = pair_tensors(pairs, idx)?;
        let logits = self.relation_logits(&geom, &subj, &obj, false)?;
        Ok(candle_nn::loss::cross_entropy(&logits, &label)?)
    }

    fn object_loss_on(&self, objects: &ObjectData, idx: &[usize]) -> Result<Tensor> {
        let (feats, label) = object_tensors(objects, idx)?;
        Ok(candle_nn::loss::cross_entropy(&self.object_logits(&feats)?, &label)?)
    }

    /// Class probabilities for each box.
    pub fn classify_objects(&self, img: &RgbImage, boxes: &[BBox]) -> Result<Vec<Vec<f64>>> {
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let feats: Vec<f32> = boxes.iter().flat_map(|b| crop_features(img, b)).collect();
        let feats = Tensor::from_vec(feats, (boxes.len(), OBJ_DIM), &Device::Cpu)?;
        let probs = candle_nn::ops::softmax(&self.object_logits(&feats)?, D::Minus1)?;
        Ok(probs.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    /// Full and counterfactual logits for every ordered pair of boxes, given classes.
    pub fn tde_inputs(&self, img: &RgbImage, boxes: &[BBox], classes: &[usize]) -> Result<Vec<((usize, usize), TdeInputs)>> {
        let (w, h) = img.dimensions();
        let mut geom = Vec::new();
        let (mut subj, mut obj, mut pairs) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..boxes.len() {
            for j in 0..boxes.len() {
                if i != j {
                    geom.extend(pair_geometry(&boxes[i], &boxes[j], w as f64, h as f64));
                    subj.push(classes[i] as u32);
                    obj.push(classes[j] as u32);
                    pairs.push((i, j));
                }
            }
        }
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let m = pairs.len();
        let geom = Tensor::from_vec(geom, (m, GEOM_DIM), &Device::Cpu)?;
        let subj = Tensor::from_vec(subj, m, &Device::Cpu)?;
        let obj = Tensor::from_vec(obj, m, &Device::Cpu)?;
        let full = self.relation_logits(&geom, &subj, &obj, false)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let cf = self.relation_logits(&geom, &subj, &obj, true)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(pairs
            .into_iter()
            .zip(full.into_iter().zip(cf))
            .map(|(p, (full_logits, counterfactual_logits))| {
                (
                    p,
                    TdeInputs {
                        full_logits,
                        counterfactual_logits,
                    },
                )
            })
            .collect())
    }

    /// Scored relation hypotheses for every ordered pair of the given boxes.
    /// Triplet score = subject confidence × object confidence × P(predicate).
    pub fn predict(&self, img: &RgbImage, boxes: &[BBox], mode: ScoreMode) -> Result<Vec<RelPrediction>> {
        let probs = self.classify_objects(img, boxes)?;
        let best: Vec<(usize, f64)> = probs
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
            })
            .collect();
        let classes: Vec<usize> = best.iter().map(|b| b.0).collect();
        let mut out = Vec::new();
        for ((i, j), inp) in self.tde_inputs(img, boxes, &classes)? {
            let logits = match mode {
                ScoreMode::Plain => inp.full_logits.clone(),
                ScoreMode::Tde => tde_scores(&inp).map_err(|e| ModelError::Shape(e.to_string()))?,
            };
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            let conf = best[i].1 * best[j].1;
            out.push(RelPrediction {
                subject_class: classes[i],
                subject_box: boxes[i],
                object_class: classes[j],
                object_box: boxes[j],
                scores: exp[..self.num_predicates].iter().map(|e| conf * e / z).collect(),
            });
        }
        Ok(out)
    }

    /// Mean relation cross-entropy over every ordered pair of `data`.
    pub fn relation_loss(&self, data: &[SggExample]) -> Result<f64> {
        let (_, pairs) = collect(data, self.num_classes, self.num_predicates)?;
        if pairs.label.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let idx: Vec<usize> = (0..pairs.label.len()).collect();
        Ok(self.relation_loss_on(&pairs, &idx)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    pub fn checkpoint_meta(&self, v: &Vocab) -> CheckpointMeta {
        CheckpointMeta {
            kind: "sgg".into(),
            config_id: String::new(),
            vocab_hash: v.fingerprint(),
            extra: serde_json::json!({
                "hyper": self.hyper,
                "num_classes": self.num_classes,
                "num_predicates": self.num_predicates,
            }),
        }
    }

    pub fn save(&self, path: &std::path::Path, v: &Vocab) -> Result<()> {
        self.ps.save(path, &self.checkpoint_meta(v))
    }

    pub fn load(path: &std::path::Path, v: &Vocab) -> Result<Self> {
        let meta = ParamStore::read_meta(path)?;
        if meta.kind != "sgg" || meta.vocab_hash != v.fingerprint() {
            return Err(ModelError::Checkpoint("not an SGG checkpoint for this vocabulary".into()));
        }
        let field = |k: &str| meta.extra.get(k).cloned().ok_or_else(|| ModelError::Checkpoint(format!("missing {k}")));
        let hyper: SggHyper = serde_json::from_value(field("hyper")?).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let nc = field("num_classes")?.as_u64().unwrap_or(0) as usize;
        let np = field("num_predicates")?.as_u64().unwrap_or(0) as usize;
        let m = Self::build(nc, np, hyper, vec![1.0; nc * nc * (np + 1)], vec![0.0; GEOM_DIM])?;
        m.ps.load(path)?;
        Ok(m)
    }
}

fn pair_tensors(p: &PairData, idx: &[usize]) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let dev = Device::Cpu;
    let geom: Vec<f32> = idx.iter().flat_map(|&i| p.geom[i * GEOM_DIM..(i + 1) * GEOM_DIM].iter().copied()).collect();
    Ok((
        Tensor::from_vec(geom, (idx.len(), GEOM_DIM), &dev)?,
        Tensor::from_vec(idx.iter().map(|&i| p.subj[i]).collect::<Vec<_>>(), idx.len(), &dev)?,
        Tensor::from_vec(idx.iter().map(|&i| p.obj[i]).collect::<Vec<_>>(), idx.len(), &dev)?,
        Tensor::from_vec(idx.iter().map(|&i| p.label[i]).collect::<Vec<_>>(), idx.len(), &dev)?,
    ))
}

fn object_tensors(o: &ObjectData, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let dev = Device::Cpu;
    let feats: Vec<f32> = idx.iter().flat_map(|&i| o.feats[i * OBJ_DIM..(i + 1) * OBJ_DIM].iter().copied()).collect();
    Ok((
        Tensor::from_vec(feats, (idx.len(), OBJ_DIM), &dev)?,
        Tensor::from_vec(idx.iter().map(|&i| o.label[i]).collect::<Vec<_>>(), idx.len(), &dev)?,
    ))
}

/// Laplace-smoothed P(label | class pair), flattened row-major over (s, o).
fn frequency_table(p: &PairData, num_classes: usize, num_predicates: usize) -> Vec<f64> {
    let width = num_predicates + 1;
    let mut counts = vec![1.0; num_classes * num_classes * width];
    for i in 0..p.label.len() {
        let row = p.subj[i] as usize * num_classes + p.obj[i] as usize;
        counts[row * width + p.label[i] as usize] += 1.0;
    }
    for row in counts.chunks_mut(width) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|c| *c /= z);
    }
    counts
}

fn mean_geometry(p: &PairData) -> Vec<f64> {
    let n = p.label.len().max(1) as f64;
    let mut m = vec![0.0; GEOM_DIM];
    for row in p.geom.chunks(GEOM_DIM) {
        for (a, &x) in m.iter_mut().zip(row) {
            *a += x as f64;
        }
    }
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Trains both stages with AdamW on shuffled mini-batches, deterministic per seed.
pub fn train_sgg(
    data: &[SggExample],
    num_classes: usize,
    num_predicates: usize,
    hyper: &SggHyper,
) -> Result<(SggModel, SggTrainStats)> {
    let data: Vec<&SggExample> = data.iter().filter(|e| !e.graph.relations.is_empty()).collect();
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let owned: Vec<SggExample> = data.into_iter().cloned().collect();
    let (objects, pairs) = collect(&owned, num_classes, num_predicates)?;
    let model = SggModel::build(
        num_classes,
        num_predicates,
        hyper.clone(),
        frequency_table(&pairs, num_classes, num_predicates),
        mean_geometry(&pairs),
    )?;
    let vars = |names: &[String]| -> Vec<candle_core::Var> {
        names.iter().map(|n| model.ps.get(n).expect("registered").clone()).collect()
    };
    let params = ParamsAdamW {
        lr: hyper.lr,
        weight_decay: 1e-4,
        ..Default::default()
    };
    let mut obj_opt = AdamW::new(vars(&model.object_params), params.clone())?;
    let mut rel_opt = AdamW::new(vars(&model.relation_params), params)?;

    let all_pairs: Vec<usize> = (0..pairs.label.len()).collect();
    let all_objects: Vec<usize> = (0..objects.label.len()).collect();
    let scalar = |t: Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let initial_relation_loss = scalar(model.relation_loss_on(&pairs, &all_pairs)?)?;
    let initial_object_loss = scalar(model.object_loss_on(&objects, &all_objects)?)?;

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed);
    for _ in 0..hyper.epochs {
        let mut order = all_objects.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch) {
            obj_opt.backward_step(&model.object_loss_on(&objects, chunk)?)?;
        }
        let mut order = all_pairs.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch) {
            rel_opt.backward_step(&model.relation_loss_on(&pairs, chunk)?)?;
        }
    }
    let stats = SggTrainStats {
        initial_relation_loss,
        final_relation_loss: scalar(model.relation_loss_on(&pairs, &all_pairs)?)?,
        initial_object_loss,
        final_object_loss: scalar(model.object_loss_on(&objects, &all_objects)?)?,
        objects: objects.label.len(),
        pairs: pairs.label.len(),
    };
    Ok((model, stats))
}

/// R@K and NG-R@K for K in {20, 50, 100} and per-predicate R@100 on images
/// with ground-truth relations, scoring the ground-truth boxes.
pub fn evaluate(model: &SggModel, test: &[SggExample], mode: ScoreMode, v: &Vocab) -> Result<EvalMetrics> {
    let mut samples: Vec<EvalSample> = Vec::with_capacity(test.len());
    for ex in test.iter().filter(|e| !e.graph.relations.is_empty()) {
        let boxes = boxes_of(&ex.graph)?;
        samples.push((model.predict(&ex.image, &boxes, mode)?, ex.graph.clone()));
    }
    let mut recall = BTreeMap::new();
    let mut ng_recall = BTreeMap::new();
    for k in RECALL_KS {
        let err = |e: nesyaug_core::metrics::MetricError| ModelError::Config(e.to_string());
        recall.insert(k, dataset_recall(&samples, k, true, DEFAULT_IOU).map_err(err)?);
        ng_recall.insert(k, dataset_recall(&samples, k, false, DEFAULT_IOU).map_err(err)?);
    }
    let per = per_predicate_recall(&samples, 100, true, DEFAULT_IOU).map_err(|e| ModelError::Config(e.to_string()))?;
    let per_predicate = per
        .into_iter()
        .map(|(p, r)| (v.predicate_name(p).to_string(), r))
        .collect();
    Ok(EvalMetrics {
        recall,
        ng_recall,
        per_predicate,
    })
}
