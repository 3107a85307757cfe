//! Scene-graph conditioning of caption embeddings.
//!
//! Each relation becomes one row of a graph embedding: the concatenation of
//! subject-class, predicate and object-class lookups, projected to the model
//! width. A learned null row is always appended. Caption tokens then
//! cross-attend to the relation rows (residual form), masked so that a token
//! only sees its own relation or, when it belongs to none, the null row.
//! Without the mask every token sees every relation row.
//! Configurations with the self-attention mask follow with a residual masked
//! self-attention among tokens; the others skip it entirely.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor};
use nesyaug_core::caption::CaptionMapping;
use nesyaug_core::manifest::GeneratorId;
use nesyaug_core::mask::{build_satt_mask, build_sgc_mask, NEG_INF};
use nesyaug_core::SceneGraph;
use rand::Rng;

use crate::nn::{attention, tensor_from, Init, Linear};
use crate::params::ParamStore;
use crate::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionerConfig {
    pub use_sgc_mask: bool,
    pub use_satt_mask: bool,
    pub config_id: GeneratorId,
}

impl ConditionerConfig {
    pub fn for_generator(id: GeneratorId) -> Self {
        let (use_sgc_mask, use_satt_mask) = id.mask_flags().unwrap_or((false, false));
        Self {
            use_sgc_mask,
            use_satt_mask,
            config_id: id,
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.config_id == GeneratorId::Baseline
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionerDims {
    pub dim: usize,
    /// Width of each of the three lookups.
    pub part: usize,
    pub num_classes: usize,
    pub num_predicates: usize,
}

impl ConditionerDims {
    pub fn new(dim: usize, num_classes: usize, num_predicates: usize) -> Self {
        Self {
            dim,
            part: dim / 3,
            num_classes,
            num_predicates,
        }
    }
}

struct Projections {
    q: Linear,
    k: Linear,
    v: Linear,
}

impl Projections {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        zero_values: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, false, Init::Normal(std), rng)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, false, Init::Normal(std), rng)?,
            v: Linear::new(
                ps,
                &format!("{name}.v"),
                dim,
                dim,
                false,
                if zero_values { Init::Zeros } else { Init::Normal(std) },
                rng,
            )?,
        })
    }
}

/// A padded batch of graph embeddings: (B, R, D) where sample b uses rows
/// 0..K_b for its relations, row K_b for the null relation and pads the rest.
pub struct GraphBatch {
    pub e: Tensor,
    pub relation_counts: Vec<usize>,
}

pub struct Conditioner {
    dims: ConditionerDims,
    class_emb: Tensor,
    pred_emb: Tensor,
    project: Linear,
    null_row: Tensor,
    sgc: Projections,
    satt: Projections,
    satt_calls: AtomicUsize,
}

impl Conditioner {
    /// Value projections start at zero, so a fresh conditioner is the identity.
    pub fn new(ps: &mut ParamStore, dims: ConditionerDims, rng: &mut impl Rng) -> Result<Self> {
        Self::with_value_init(ps, dims, true, rng)
    }

    pub fn with_value_init(
        ps: &mut ParamStore,
        dims: ConditionerDims,
        zero_values: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let class_emb = ps.normal("cond.class_emb", &[dims.num_classes, dims.part], 1.0, rng)?;
        let pred_emb = ps.normal("cond.pred_emb", &[dims.num_predicates, dims.part], 1.0, rng)?;
        let project = Linear::new(ps, "cond.project", 3 * dims.part, dims.dim, true, Init::FanIn, rng)?;
        let null_row = ps.normal("cond.null_relation", &[1, dims.dim], 1.0, rng)?;
        let sgc = Projections::new(ps, "cond.sgc", dims.dim, zero_values, rng)?;
        let satt = Projections::new(ps, "cond.satt", dims.dim, zero_values, rng)?;
        Ok(Self {
            dims,
            class_emb,
            pred_emb,
            project,
            null_row,
            sgc,
            satt,
            satt_calls: AtomicUsize::new(0),
        })
    }

    pub fn dims(&self) -> ConditionerDims {
        self.dims
    }

    fn dtype(&self) -> DType {
        self.class_emb.dtype()
    }

    /// Number of self-attention evaluations so far.
    pub fn satt_calls(&self) -> usize {
        self.satt_calls.load(Ordering::Relaxed)
    }

    fn check_ids(&self, g: &SceneGraph) -> Result<Vec<(u32, u32, u32)>> {
        g.relations
            .iter()
            .map(|t| {
                let s = g
                    .class_of(t.subject_id)
                    .ok_or_else(|| ModelError::VocabMismatch(format!("missing object {}", t.subject_id)))?;
                let o = g
                    .class_of(t.object_id)
                    .ok_or_else(|| ModelError::VocabMismatch(format!("missing object {}", t.object_id)))?;
                if s >= self.dims.num_classes || o >= self.dims.num_classes {
                    return Err(ModelError::VocabMismatch(format!("object class {} out of range", s.max(o))));
                }
                if t.predicate_id >= self.dims.num_predicates {
                    return Err(ModelError::VocabMismatch(format!("predicate {} out of range", t.predicate_id)));
                }
                Ok((s as u32, t.predicate_id as u32, o as u32))
            })
            .collect()
    }

    pub fn embed_triples_batch(&self, graphs: &[&SceneGraph]) -> Result<GraphBatch> {
        let ids: Vec<Vec<(u32, u32, u32)>> = graphs.iter().map(|g| self.check_ids(g)).collect::<Result<_>>()?;
        let counts: Vec<usize> = ids.iter().map(Vec::len).collect();
        let total: usize = counts.iter().sum();
        let rows = counts.iter().max().copied().unwrap_or(0) + 1;
        let device = self.class_emb.device();

        // table = [relation rows..., null row, zero row]
        let mut parts = Vec::new();
        if total > 0 {
            let flat: Vec<&(u32, u32, u32)> = ids.iter().flatten().collect();
            let s = Tensor::from_vec(flat.iter().map(|t| t.0).collect::<Vec<_>>(), total, device)?;
            let p = Tensor::from_vec(flat.iter().map(|t| t.1).collect::<Vec<_>>(), total, device)?;
            let o = Tensor::from_vec(flat.iter().map(|t| t.2).collect::<Vec<_>>(), total, device)?;
            let cat = Tensor::cat(
                &[
                    self.class_emb.index_select(&s, 0)?,
                    self.pred_emb.index_select(&p, 0)?,
                    self.class_emb.index_select(&o, 0)?,
                ],
                1,
            )?;
            parts.push(self.project.forward(&cat)?);
        }
        parts.push(self.null_row.clone());
        parts.push(Tensor::zeros((1, self.dims.dim), self.dtype(), device)?);
        let table = Tensor::cat(&parts, 0)?;
        let (null_idx, zero_idx) = (total as u32, total as u32 + 1);

        let mut gather = Vec::with_capacity(graphs.len() * rows);
        let mut offset = 0u32;
        for &k in &counts {
            for r in 0..rows {
                gather.push(match r.cmp(&k) {
                    std::cmp::Ordering::Less => offset + r as u32,
                    std::cmp::Ordering::Equal => null_idx,
                    std::cmp::Ordering::Greater => zero_idx,
                });
            }
            offset += k as u32;
        }
        let idx = Tensor::from_vec(gather, graphs.len() * rows, device)?;
        let e = table.index_select(&idx, 0)?.reshape((graphs.len(), rows, self.dims.dim))?;
        Ok(GraphBatch {
            e,
            relation_counts: counts,
        })
    }

    /// (K+1) × D: one row per relation plus the null row.
    pub fn embed_triples(&self, g: &SceneGraph) -> Result<Tensor> {
        Ok(self.embed_triples_batch(&[g])?.e.squeeze(0)?)
    }

    /// Residual masked cross-attention from tokens (B, N, D) to graph rows
    /// (B, R, D). `bias` is an additive (B, N, R) mask; `None` means zeros.
    pub fn sgc_attention(&self, w: &Tensor, e: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        check_dims(w, e, bias, "sgc_attention")?;
        let q = self.sgc.q.forward(w)?;
        let k = self.sgc.k.forward(e)?;
        let v = self.sgc.v.forward(e)?;
        let (out, _) = attention(&q, &k, &v, bias)?;
        Ok((w + out)?)
    }

    /// Residual masked self-attention among tokens; `bias` is (B, N, N).
    pub fn relational_self_attention(&self, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
        check_dims(w, w, Some(bias), "relational_self_attention")?;
        self.satt_calls.fetch_add(1, Ordering::Relaxed);
        let q = self.satt.q.forward(w)?;
        let k = self.satt.k.forward(w)?;
        let v = self.satt.v.forward(w)?;
        let (out, _) = attention(&q, &k, &v, Some(bias))?;
        Ok((w + out)?)
    }

    /// Conditions a padded batch. `lens[b]` is the true token count of sample b;
    /// `maps[b]` must cover exactly those tokens.
    pub fn condition_batch(
        &self,
        w: &Tensor,
        lens: &[usize],
        graphs: &[&SceneGraph],
        maps: &[&CaptionMapping],
        cfg: ConditionerConfig,
    ) -> Result<Tensor> {
        if cfg.is_baseline() {
            return Ok(w.clone());
        }
        let (b, n, _) = w.dims3()?;
        if graphs.len() != b || maps.len() != b || lens.len() != b {
            return Err(ModelError::Shape(format!(
                "batch of {b} with {} graphs, {} captions",
                graphs.len(),
                maps.len()
            )));
        }
        for (m, &len) in maps.iter().zip(lens) {
            if m.len() != len || len > n {
                return Err(ModelError::Shape(format!("caption of {} tokens for {len} embeddings", m.len())));
            }
        }
        let gb = self.embed_triples_batch(graphs)?;
        let r = gb.e.dim(1)?;
        let sgc_bias = sgc_bias(maps, lens, &gb.relation_counts, n, r, cfg.use_sgc_mask, self.dtype())?;
        let mut out = self.sgc_attention(w, &gb.e, Some(&sgc_bias))?;
        if cfg.use_satt_mask {
            let satt_bias = satt_bias(maps, lens, n, self.dtype())?;
            out = self.relational_self_attention(&out, &satt_bias)?;
        }
        Ok(out)
    }

    /// N × D → N × D for a single caption.
    pub fn condition(
        &self,
        w: &Tensor,
        g: &SceneGraph,
        cfg: ConditionerConfig,
        m: &CaptionMapping,
    ) -> Result<Tensor> {
        let n = w.dim(0)?;
        Ok(self
            .condition_batch(&w.unsqueeze(0)?, &[n], &[g], &[m], cfg)?
            .squeeze(0)?)
    }
}

fn check_dims(w: &Tensor, e: &Tensor, bias: Option<&Tensor>, op: &str) -> Result<()> {
    let (b, n, d) = w.dims3().map_err(|_| ModelError::Shape(format!("{op}: tokens must be (B, N, D)")))?;
    let (b2, r, d2) = e.dims3().map_err(|_| ModelError::Shape(format!("{op}: keys must be (B, R, D)")))?;
    if b != b2 || d != d2 {
        return Err(ModelError::Shape(format!("{op}: ({b}, {n}, {d}) vs ({b2}, {r}, {d2})")));
    }
    if let Some(m) = bias {
        if m.dims() != [b, n, r] {
            return Err(ModelError::Shape(format!("{op}: mask {:?}, expected {:?}", m.dims(), [b, n, r])));
        }
    }
    Ok(())
}

/// (B, N, R) additive cross-attention mask. Real tokens follow the
/// token-relation map when `masked`, or see every relation row otherwise
/// (the null row only if the graph has no relations); padded token rows see
/// only the null row; padded relation rows are never visible.
pub fn sgc_bias(
    maps: &[&CaptionMapping],
    lens: &[usize],
    counts: &[usize],
    n: usize,
    r: usize,
    masked: bool,
    dtype: DType,
) -> Result<Tensor> {
    let mut data = vec![NEG_INF; maps.len() * n * r];
    for (b, m) in maps.iter().enumerate() {
        let k = counts[b];
        if masked && m.relation_count != k {
            return Err(ModelError::Shape(format!(
                "caption maps {} relations, graph has {k}",
                m.relation_count
            )));
        }
        let mask = build_sgc_mask(m);
        for i in 0..n {
            for j in 0..=k {
                let open = if i >= lens[b] {
                    j == k
                } else if masked {
                    mask.allowed(i, j)
                } else {
                    // Unmasked attention reads the relation rows only; the
                    // null row stands in when there are none.
                    j < k || k == 0
                };
                if open {
                    data[(b * n + i) * r + j] = 0.0;
                }
            }
        }
    }
    tensor_from(data, &[maps.len(), n, r], dtype)
}

/// (B, N, N) additive self-attention mask; padded tokens see only themselves.
pub fn satt_bias(maps: &[&CaptionMapping], lens: &[usize], n: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![NEG_INF; maps.len() * n * n];
    for (b, m) in maps.iter().enumerate() {
        let mask = build_satt_mask(m);
        for i in 0..n {
            for j in 0..n {
                let open = if i < lens[b] && j < lens[b] { mask.allowed(i, j) } else { i == j };
                if open {
                    data[(b * n + i) * n + j] = 0.0;
                }
            }
        }
    }
    tensor_from(data, &[maps.len(), n, n], dtype)
}
