use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{softmax, Tensor};
use crate::error::{Error, Result};
use crate::masking::rng_for;

/// Frozen text encoder: maps a token-id sequence to one `dim`-vector per token.
pub trait Backbone {
    fn dim(&self) -> usize;

    fn encode(&self, ids: &[usize]) -> Result<Tensor>;

    /// Stable fingerprint of the frozen parameters.
    fn checksum(&self) -> u64;
}

/// Seeded stand-in for a language-model backbone: embedding lookup
/// (uniform in [-0.1, 0.1]) plus scaled sinusoidal positions, followed by one
/// causal self-attention layer with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    dim: usize,
    vocab_size: usize,
    seed: u64,
    embed: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
}

const POSITION_SCALE: f64 = 0.1;

impl ToyBackbone {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        assert!(vocab_size > 0 && dim > 0);
        let mut rng = rng_for(seed ^ 0x6261_636b_626f_6e65);
        let embed = (0..vocab_size * dim).map(|_| rng.gen_range(-0.1..=0.1)).collect();
        let bound = 1.0 / (dim as f64).sqrt();
        let mut proj = || -> Vec<f64> { (0..dim * dim).map(|_| rng.gen_range(-bound..=bound)).collect() };
        let (wq, wk, wv) = (proj(), proj(), proj());
        ToyBackbone {
            dim,
            vocab_size,
            seed,
            embed,
            wq,
            wk,
            wv,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Replaces the embedding table with an external `vocab × dim` dump of
    /// little-endian `f32` values.
    pub fn import_embeddings(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = fs::read(path)?;
        self.set_embeddings_f32_le(&bytes)
    }

    pub fn set_embeddings_f32_le(&mut self, bytes: &[u8]) -> Result<()> {
        let expected = self.vocab_size * self.dim * 4;
        if bytes.len() != expected {
            return Err(Error::Shape(format!(
                "embedding dump has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        self.embed = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(())
    }

    /// Frozen parameters as named `embed`, `wq`, `wk`, `wv` matrices.
    pub fn tensors(&self) -> Vec<(&'static str, Tensor)> {
        let (v, d) = (self.vocab_size, self.dim);
        let m = |r: usize, data: &[f64]| Tensor::matrix(r, d, data.to_vec()).expect("shape");
        vec![
            ("embed", m(v, &self.embed)),
            ("wq", m(d, &self.wq)),
            ("wk", m(d, &self.wk)),
            ("wv", m(d, &self.wv)),
        ]
    }

    /// Inverse of [`ToyBackbone::tensors`].
    pub fn from_tensors(seed: u64, embed: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Self> {
        let dim = embed.cols();
        for w in [wq, wk, wv] {
            if w.shape() != [dim, dim] {
                return Err(Error::Shape(format!("backbone projection {:?}, expected {dim}x{dim}", w.shape())));
            }
        }
        if embed.rows() == 0 || dim == 0 {
            return Err(Error::Shape("empty backbone embedding".into()));
        }
        Ok(ToyBackbone {
            dim,
            vocab_size: embed.rows(),
            seed,
            embed: embed.data().to_vec(),
            wq: wq.data().to_vec(),
            wk: wk.data().to_vec(),
            wv: wv.data().to_vec(),
        })
    }

    fn position(&self, pos: usize, k: usize) -> f64 {
        let pair = (k / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / self.dim as f64);
        POSITION_SCALE * if k % 2 == 0 { angle.sin() } else { angle.cos() }
    }

    fn project(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for (k, &xk) in x.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(&w[k * d..(k + 1) * d]) {
                *o += xk * wv;
            }
        }
        out
    }
}

impl Backbone for ToyBackbone {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, ids: &[usize]) -> Result<Tensor> {
        let d = self.dim;
        let s = ids.len();
        if s == 0 {
            return Ok(Tensor::zeros(&[0, d]));
        }
        let x: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(pos, &id)| {
                let id = if id < self.vocab_size { id } else { super::vocab::UNK };
                (0..d)
                    .map(|k| self.embed[id * d + k] + self.position(pos, k))
                    .collect()
            })
            .collect();
        let q: Vec<Vec<f64>> = x.iter().map(|r| self.project(r, &self.wq)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|r| self.project(r, &self.wk)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|r| self.project(r, &self.wv)).collect();
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Vec::with_capacity(s * d);
        for p in 0..s {
            let scores: Vec<f64> = (0..=p)
                .map(|t| q[p].iter().zip(&k[t]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let probs = softmax(&scores);
            let mut row = x[p].clone();
            for (t, w) in probs.iter().enumerate() {
                row.iter_mut().zip(&v[t]).for_each(|(r, vv)| *r += w * vv);
            }
            out.extend(row);
        }
        Tensor::matrix(s, d, out)
    }

    fn checksum(&self) -> u64 {
        // FNV-1a over the parameter bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.embed.iter().chain(&self.wq).chain(&self.wk).chain(&self.wv) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}
