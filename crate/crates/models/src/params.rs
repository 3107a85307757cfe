//! Named parameters with seeded initialisation and a simple checkpoint format.
//!
//! A checkpoint is an 8-byte little-endian header length, a JSON header
//! (tensor names, shapes, metadata) and the concatenated little-endian f32
//! values in header order.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{ModelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config_id: String,
    pub vocab_hash: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<(String, Vec<usize>)>,
}

pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a tensor with explicit values.
    pub fn from_values(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.get(name).is_some() {
            return Err(ModelError::Config(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.push((name.to_string(), var));
        Ok(out)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect::<Vec<f64>>();
        self.from_values(name, data, shape)
    }

    /// Uniform in ±1/sqrt(fan_in).
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.from_values(name, data, shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.from_values(name, vec![0.0; shape.iter().product()], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn names(&self) -> Vec<&str> {
        self.vars.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn f32_values(v: &Var) -> Result<Vec<f32>> {
        Ok(v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    /// sha256 over names, shapes and f32 values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in &self.vars {
            h.update(name.as_bytes());
            h.update(format!("{:?}", v.dims()).as_bytes());
            for x in Self::f32_values(v)? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let header = Header {
            meta: meta.clone(),
            tensors: self.vars.iter().map(|(n, v)| (n.clone(), v.dims().to_vec())).collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        for (_, v) in &self.vars {
            for x in Self::f32_values(v)? {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Reads a checkpoint's metadata without touching any parameters.
    pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
        Ok(read_header(&mut std::fs::File::open(path)?)?.meta)
    }

    /// Overwrites every parameter with the checkpoint's values. Names and
    /// shapes must match exactly.
    pub fn load(&self, path: &Path) -> Result<CheckpointMeta> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let header = read_header(&mut f)?;
        if header.tensors.len() != self.vars.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                header.tensors.len(),
                self.vars.len()
            )));
        }
        for ((name, shape), (own_name, var)) in header.tensors.iter().zip(&self.vars) {
            if name != own_name || shape.as_slice() != var.dims() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name} {shape:?} does not match {own_name} {:?}",
                    var.dims()
                )));
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            f.read_exact(&mut buf)?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(data, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(header.meta)
    }
}

fn read_header(f: &mut impl Read) -> Result<Header> {
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 26 {
        return Err(ModelError::Checkpoint("header too large".into()));
    }
    let mut buf = vec![0u8; len];
    f.read_exact(&mut buf)?;
    serde_json::from_slice(&buf).map_err(|e| ModelError::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new(DType::F32);
        ps.normal("a", &[3, 4], 0.1, &mut rng).unwrap();
        ps.fan_in("b", &[5], 5, &mut rng).unwrap();
        ps.zeros("c", &[2]).unwrap();
        ps
    }

    #[test]
    fn seeded_init_is_reproducible() {
        assert_eq!(store(3).fingerprint().unwrap(), store(3).fingerprint().unwrap());
        assert_ne!(store(3).fingerprint().unwrap(), store(4).fingerprint().unwrap());
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let meta = CheckpointMeta {
            kind: "test".into(),
            config_id: "1".into(),
            vocab_hash: "abc".into(),
            extra: serde_json::json!({"k": 1}),
        };
        let a = store(1);
        a.save(&path, &meta).unwrap();
        let b = store(2);
        assert_eq!(b.load(&path).unwrap(), meta);
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert_eq!(ParamStore::read_meta(&path).unwrap(), meta);
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let meta = CheckpointMeta {
            kind: "test".into(),
            config_id: "1".into(),
            vocab_hash: String::new(),
            extra: serde_json::Value::Null,
        };
        store(1).save(&path, &meta).unwrap();
        let mut other = ParamStore::new(DType::F32);
        other.zeros("a", &[4, 3]).unwrap();
        assert!(other.load(&path).is_err());
    }
}
