//! Attention masks derived from a caption's token-to-relation map.
//!
//! Masks are stored as visibility bits and turned into additive masks
//! (`0` where attention is allowed, [`NEG_INF`] elsewhere) on demand.
//!
//! * Cross-attention mask: `N x (K + 1)`. A mapped token sees only the column
//!   of its relation; unmapped tokens see only the trailing null-relation column.
//! * Self-attention mask: `N x N`. Two mapped tokens see each other when they
//!   belong to the same relation or to relations sharing an endpoint object.
//!   Unmapped tokens see each other and nothing mapped. The diagonal is open.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::caption::CaptionMapping;
use crate::error::ShapeError;

/// Finite stand-in for negative infinity in additive masks.
pub const NEG_INF: f64 = -1e9;

/// Dense boolean matrix, row-major; `true` means the query may attend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl MaskMatrix {
    pub fn blocked(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![false; rows * cols],
        }
    }

    pub fn open(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, allowed: bool) {
        self.allowed[i * self.cols + j] = allowed;
    }

    /// Additive value of one cell.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        if self.allowed(i, j) {
            0.0
        } else {
            NEG_INF
        }
    }

    pub fn additive(&self) -> Array2<f64> {
        self.additive_with(NEG_INF)
    }

    pub fn additive_with(&self, neg_inf: f64) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(i, j)| {
            if self.allowed(i, j) {
                0.0
            } else {
                neg_inf
            }
        })
    }

    pub fn has_dead_row(&self) -> bool {
        (0..self.rows).any(|i| (0..self.cols).all(|j| !self.allowed(i, j)))
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self.allowed(i, j) == self.allowed(j, i)))
    }

    /// Compact form: bits packed MSB-first per byte, row-major, hex encoded.
    pub fn to_bits(&self) -> PackedMask {
        let mut bytes = vec![0u8; self.allowed.len().div_ceil(8)];
        for (idx, &a) in self.allowed.iter().enumerate() {
            if a {
                bytes[idx / 8] |= 0x80 >> (idx % 8);
            }
        }
        PackedMask {
            rows: self.rows,
            cols: self.cols,
            bits: hex::encode(bytes),
        }
    }

    pub fn from_bits(p: &PackedMask) -> Result<Self, String> {
        let bytes = hex::decode(&p.bits).map_err(|e| e.to_string())?;
        let n = p.rows * p.cols;
        if bytes.len() != n.div_ceil(8) {
            return Err(format!("expected {} bytes for {}x{}", n.div_ceil(8), p.rows, p.cols));
        }
        let allowed = (0..n).map(|idx| bytes[idx / 8] & (0x80 >> (idx % 8)) != 0).collect();
        Ok(Self {
            rows: p.rows,
            cols: p.cols,
            allowed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedMask {
    pub rows: usize,
    pub cols: usize,
    pub bits: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMaskPair {
    pub sgc: MaskMatrix,
    pub satt: MaskMatrix,
}

impl AttentionMaskPair {
    pub fn build(m: &CaptionMapping) -> Self {
        Self {
            sgc: build_sgc_mask(m),
            satt: build_satt_mask(m),
        }
    }

    pub fn tokens(&self) -> usize {
        self.sgc.rows()
    }

    pub fn relations(&self) -> usize {
        self.sgc.cols() - 1
    }
}

/// Cross-attention mask with the trailing null-relation column.
pub fn build_sgc_mask(m: &CaptionMapping) -> MaskMatrix {
    let k = m.relation_count;
    let mut mask = MaskMatrix::blocked(m.tau.len(), k + 1);
    for (i, t) in m.tau.iter().enumerate() {
        match t {
            Some(r) => mask.set(i, *r, true),
            None => mask.set(i, k, true),
        }
    }
    mask
}

fn relations_share_endpoint(m: &CaptionMapping, a: usize, b: usize) -> bool {
    let (s1, o1) = m.endpoints[a];
    let (s2, o2) = m.endpoints[b];
    s1 == s2 || s1 == o2 || o1 == s2 || o1 == o2
}

pub fn build_satt_mask(m: &CaptionMapping) -> MaskMatrix {
    let n = m.tau.len();
    let mut mask = MaskMatrix::blocked(n, n);
    for i in 0..n {
        for j in 0..n {
            let visible = i == j
                || match (m.tau[i], m.tau[j]) {
                    (None, None) => true,
                    (Some(a), Some(b)) => a == b || relations_share_endpoint(m, a, b),
                    _ => false,
                };
            mask.set(i, j, visible);
        }
    }
    mask
}

pub fn apply_additive_mask(scores: &Array2<f64>, mask: &Array2<f64>) -> Result<Array2<f64>, ShapeError> {
    if scores.dim() != mask.dim() {
        return Err(ShapeError {
            expected: scores.dim(),
            got: mask.dim(),
        });
    }
    Ok(scores + mask)
}

/// Numerically stable row softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}
