//! Small building blocks on top of candle tensors.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, D};
use rand::Rng;

use crate::params::ParamStore;
use crate::Result;

/// Initialisation for a weight matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    FanIn,
    Normal(f64),
    Zeros,
}

#[derive(Clone)]
pub struct Linear {
    /// in × out
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let weight = match init {
            Init::FanIn => ps.fan_in(&wname, &[input, output], input, rng)?,
            Init::Normal(std) => ps.normal(&wname, &[input, output], std, rng)?,
            Init::Zeros => ps.zeros(&wname, &[input, output])?,
        };
        let bias = if bias {
            Some(ps.zeros(&format!("{name}.bias"), &[output])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Applies to the last dimension of `x` (any rank ≥ 2).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Parameter-free normalisation over the last dimension.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

/// Differentiable softmax over the last dimension.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// softmax(q kᵀ / sqrt(d) + bias) v for (B, N, d) queries and (B, M, d) keys.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let d = q.dim(D::Minus1)? as f64;
    let mut scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / d.sqrt())?;
    if let Some(b) = bias {
        scores = scores.broadcast_add(b)?;
    }
    let weights = softmax(&scores)?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

/// Sinusoidal position table (rows × dim), even columns sin, odd columns cos.
pub fn sinusoidal(rows: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows * dim);
    for p in 0..rows {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = p as f64 * freq;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Ok(Tensor::from_vec(data, (rows, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Tensor from row-major f64 values, cast to `dtype`.
pub fn tensor_from(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Gathers the zero-padded 3×3 neighbourhood of every token on a g×g grid:
/// (B, g·g, C) → (B, g·g, 9C), neighbour-major. Followed by a matmul with a
/// (9C, C') weight this is a 3×3 convolution in token layout.
#[derive(Debug, Clone, Copy)]
pub struct Neighbours3 {
    pub grid: usize,
}

/// Adjoint of [`Neighbours3`]: scatter-adds (B, g·g, 9C) back onto (B, g·g, C).
#[derive(Debug, Clone, Copy)]
struct Neighbours3Adjoint {
    grid: usize,
}

fn neighbour(g: usize, y: usize, x: usize, k: usize) -> Option<usize> {
    let ny = (y + k / 3).checked_sub(1).filter(|&v| v < g)?;
    let nx = (x + k % 3).checked_sub(1).filter(|&v| v < g)?;
    Some(ny * g + nx)
}

fn gather<T: Copy + Default>(src: &[T], b: usize, g: usize, c: usize) -> Vec<T> {
    let l = g * g;
    let mut out = vec![T::default(); b * l * 9 * c];
    for bi in 0..b {
        for y in 0..g {
            for x in 0..g {
                let row = (bi * l + y * g + x) * 9 * c;
                for k in 0..9 {
                    if let Some(n) = neighbour(g, y, x, k) {
                        let s = (bi * l + n) * c;
                        out[row + k * c..row + (k + 1) * c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    out
}

fn scatter<T: Copy + Default + std::ops::AddAssign>(src: &[T], b: usize, g: usize, c: usize) -> Vec<T> {
    let l = g * g;
    let mut out = vec![T::default(); b * l * c];
    for bi in 0..b {
        for y in 0..g {
            for x in 0..g {
                let row = (bi * l + y * g + x) * 9 * c;
                for k in 0..9 {
                    if let Some(n) = neighbour(g, y, x, k) {
                        let d = (bi * l + n) * c;
                        for (o, &v) in out[d..d + c].iter_mut().zip(&src[row + k * c..row + (k + 1) * c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn grid_dims(layout: &Layout, g: usize, factor: usize) -> candle_core::Result<(usize, usize)> {
    let (b, l, c) = layout.shape().dims3()?;
    if l != g * g || c % factor != 0 {
        candle_core::bail!("expected (B, {}, C) tokens, got {:?}", g * g, layout.shape());
    }
    Ok((b, c / factor))
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, z)) => Ok(&v[a..z]),
        None => candle_core::bail!("neighbourhood ops need contiguous input"),
    }
}

impl CustomOp1 for Neighbours3 {
    fn name(&self) -> &'static str {
        "neighbours3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.grid;
        let (b, c) = grid_dims(layout, g, 1)?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(gather(contiguous(v, layout)?, b, g, c)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(contiguous(v, layout)?, b, g, c)),
            _ => candle_core::bail!("neighbours3 supports f32 and f64"),
        };
        Ok((out, Shape::from((b, g * g, 9 * c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Neighbours3Adjoint { grid: self.grid })?))
    }
}

impl CustomOp1 for Neighbours3Adjoint {
    fn name(&self) -> &'static str {
        "neighbours3-adjoint"
    }

    fn cpu_fwd(&self, s: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.grid;
        let (b, c) = grid_dims(layout, g, 9)?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(contiguous(v, layout)?, b, g, c)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(contiguous(v, layout)?, b, g, c)),
            _ => candle_core::bail!("neighbours3 supports f32 and f64"),
        };
        Ok((out, Shape::from((b, g * g, c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Neighbours3 { grid: self.grid })?))
    }
}

/// 3×3 "same" convolution of (B, g·g, C) tokens with a (9C, C') weight.
pub fn conv3x3(h: &Tensor, grid: usize, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let cols = h.contiguous()?.apply_op1(Neighbours3 { grid })?;
    Ok(cols.broadcast_matmul(weight)?.broadcast_add(bias)?)
}
