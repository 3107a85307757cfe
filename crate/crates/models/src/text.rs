//! Toy text encoder: a learned word-embedding table plus fixed sinusoidal
//! positions.

use std::collections::HashMap;

use candle_core::{Tensor, D};
use nesyaug_core::caption::{caption_words, MAX_TOKENS};
use nesyaug_core::Vocab;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::nn::{sinusoidal, tensor_from};
use crate::params::ParamStore;
use crate::Result;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TextVocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl TextVocab {
    /// `<pad>`, `<unk>`, then every word a caption over `v` can contain.
    pub fn from_vocab(v: &Vocab) -> Self {
        let words: Vec<String> = ["<pad>", "<unk>"]
            .into_iter()
            .map(String::from)
            .chain(caption_words(v))
            .collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

pub struct TextEncoder {
    table: Tensor,
    positions: Tensor,
    dim: usize,
}

impl TextEncoder {
    pub fn new(ps: &mut ParamStore, vocab_len: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let table = ps.normal("text.embed", &[vocab_len, dim], 1.0, rng)?;
        let positions = sinusoidal(MAX_TOKENS, dim, ps.dtype())?;
        Ok(Self { table, positions, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Pads `seqs` to the longest one and embeds them: (B, N, D) plus the
    /// additive key-padding bias (B, 1, N) with 0 on real tokens.
    pub fn encode_batch(&self, seqs: &[Vec<u32>]) -> Result<(Tensor, Tensor)> {
        let n = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let b = seqs.len();
        let mut ids = Vec::with_capacity(b * n);
        let mut bias = Vec::with_capacity(b * n);
        for s in seqs {
            for i in 0..n {
                ids.push(s.get(i).copied().unwrap_or(PAD));
                bias.push(if i < s.len() { 0.0 } else { nesyaug_core::mask::NEG_INF });
            }
        }
        let idx = Tensor::from_vec(ids, b * n, self.table.device())?;
        let emb = self.table.index_select(&idx, 0)?.reshape((b, n, self.dim))?;
        let pos = self.positions.narrow(0, 0, n)?.unsqueeze(0)?;
        let w = emb.broadcast_add(&pos)?;
        let bias = tensor_from(bias, &[b, 1, n], self.table.dtype())?;
        Ok((w, bias))
    }

    /// N × D embedding of one token sequence.
    pub fn encode(&self, ids: &[u32]) -> Result<Tensor> {
        let (w, _) = self.encode_batch(&[ids.to_vec()])?;
        Ok(w.squeeze(0)?.narrow(D::Minus2, 0, ids.len().max(1))?)
    }
}
