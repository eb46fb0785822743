//! Binary trace files.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "KVT1"
//! u32 version = 1, L, H, H_kv, d_h, N, w, vocab
//! u64 seed
//! per layer: K [H_kv x N x d_h], V [H_kv x N x d_h], Q [H x (w+1) x d_h], W_O [d x d]
//! W_M [d x vocab]
//! per layer: FFN up [d x 4d], FFN down [4d x d]
//! ```
//!
//! All tensors are row-major `f32`.

use std::fs;
use std::path::Path;

use crate::cache::LayerKVCache;
use crate::error::{ensure, Error, Result};
use crate::numerics::Mat;
use crate::toymodel::{ModelConfig, ModelSnapshot, PrefilledLayer, FFN_MULT};

pub const MAGIC: &[u8; 4] = b"KVT1";
pub const VERSION: u32 = 1;
const HEADER_BYTES: usize = 4 + 8 * 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub layers: u32,
    pub heads: u32,
    pub kv_heads: u32,
    pub head_dim: u32,
    pub tokens: u32,
    pub window: u32,
    pub vocab: u32,
    pub seed: u64,
}

impl TraceHeader {
    fn dims(&self) -> [usize; 7] {
        [self.layers, self.heads, self.kv_heads, self.head_dim, self.tokens, self.window, self.vocab].map(|x| x as usize)
    }

    pub fn model_dim(&self) -> usize {
        (self.heads * self.head_dim) as usize
    }

    /// Floats in the per-layer block before W_M.
    fn layer_floats(&self) -> usize {
        let [_, h, kv, dh, n, w, _] = self.dims();
        let d = self.model_dim();
        2 * kv * n * dh + h * (w + 1) * dh + d * d
    }

    /// Exact file size implied by the header.
    pub fn file_len(&self) -> usize {
        let [l, _, _, _, _, _, vocab] = self.dims();
        let d = self.model_dim();
        let floats = l * self.layer_floats() + d * vocab + l * 2 * FFN_MULT * d * d;
        HEADER_BYTES + 4 * floats
    }

    pub fn model_config(&self) -> ModelConfig {
        let [l, h, kv, dh, _, w, vocab] = self.dims();
        ModelConfig::new(l, h, kv, dh, w).with_vocab(vocab).with_seed(self.seed)
    }

    fn validate(&self) -> Result<()> {
        let cfg = self.model_config();
        cfg.validate().map_err(|e| Error::Format(format!("bad header: {e}")))?;
        cfg.validate_tokens(self.tokens as usize).map_err(|e| Error::Format(format!("bad header: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceLayer {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    pub queries: Vec<f32>,
    pub w_o: Vec<f32>,
    pub ffn_up: Vec<f32>,
    pub ffn_down: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub layers: Vec<TraceLayer>,
    pub w_m: Vec<f32>,
}

fn narrow(xs: impl IntoIterator<Item = f64>) -> Vec<f32> {
    xs.into_iter().map(|x| x as f32).collect()
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Config(format!("{what} = {x} does not fit the trace header")))
}

impl TraceFile {
    pub fn from_snapshot(snapshot: &ModelSnapshot) -> Result<Self> {
        let cfg = &snapshot.config;
        let header = TraceHeader {
            layers: to_u32(cfg.layers, "layers")?,
            heads: to_u32(cfg.heads, "heads")?,
            kv_heads: to_u32(cfg.kv_heads, "kv_heads")?,
            head_dim: to_u32(cfg.head_dim, "head_dim")?,
            tokens: to_u32(snapshot.tokens(), "tokens")?,
            window: to_u32(cfg.window, "window")?,
            vocab: to_u32(cfg.vocab, "vocab")?,
            seed: cfg.seed,
        };
        let layers = snapshot
            .layers
            .iter()
            .map(|l| TraceLayer {
                keys: narrow(l.cache.heads().iter().flat_map(|h| h.keys().iter().flatten().copied())),
                values: narrow(l.cache.heads().iter().flat_map(|h| h.values().iter().flatten().copied())),
                queries: narrow(l.queries.iter().flatten().flatten().copied()),
                w_o: narrow(l.w_o.data().iter().copied()),
                ffn_up: narrow(l.ffn_up.data().iter().copied()),
                ffn_down: narrow(l.ffn_down.data().iter().copied()),
            })
            .collect();
        Ok(TraceFile { header, layers, w_m: narrow(snapshot.w_m.data().iter().copied()) })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(h.file_len());
        out.extend_from_slice(MAGIC);
        for x in [VERSION, h.layers, h.heads, h.kv_heads, h.head_dim, h.tokens, h.window, h.vocab] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&h.seed.to_le_bytes());
        let mut put = |xs: &[f32]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for l in &self.layers {
            put(&l.keys);
            put(&l.values);
            put(&l.queries);
            put(&l.w_o);
        }
        put(&self.w_m);
        for l in &self.layers {
            put(&l.ffn_up);
            put(&l.ffn_down);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= HEADER_BYTES, Format, "file of {} bytes is shorter than the header", bytes.len());
        ensure!(&bytes[..4] == MAGIC, Format, "bad magic bytes");
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        ensure!(word(0) == VERSION, Format, "unsupported trace version {}", word(0));
        let header = TraceHeader {
            layers: word(1),
            heads: word(2),
            kv_heads: word(3),
            head_dim: word(4),
            tokens: word(5),
            window: word(6),
            vocab: word(7),
            seed: u64::from_le_bytes(bytes[36..44].try_into().expect("8 bytes")),
        };
        header.validate()?;
        ensure!(
            bytes.len() == header.file_len(),
            Format,
            "file has {} bytes, header implies {}",
            bytes.len(),
            header.file_len()
        );
        let mut pos = HEADER_BYTES;
        let mut take = |n: usize| -> Vec<f32> {
            let out = bytes[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += 4 * n;
            out
        };
        let [l, h, kv, dh, n, w, vocab] = header.dims();
        let d = header.model_dim();
        let mut layers: Vec<TraceLayer> = (0..l)
            .map(|_| TraceLayer {
                keys: take(kv * n * dh),
                values: take(kv * n * dh),
                queries: take(h * (w + 1) * dh),
                w_o: take(d * d),
                ffn_up: Vec::new(),
                ffn_down: Vec::new(),
            })
            .collect();
        let w_m = take(d * vocab);
        for layer in &mut layers {
            layer.ffn_up = take(d * FFN_MULT * d);
            layer.ffn_down = take(FFN_MULT * d * d);
        }
        Ok(TraceFile { header, layers, w_m })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the snapshot, recomputing recent-window attention from the
    /// stored queries and keys.
    pub fn to_snapshot(&self) -> Result<ModelSnapshot> {
        let config = self.header.model_config();
        let [_, _, kv, dh, n, w, vocab] = self.header.dims();
        let d = self.header.model_dim();
        let wide = |xs: &[f32]| xs.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(index, tl)| {
                let mut cache = LayerKVCache::new(kv, dh, w);
                let (keys, values) = (wide(&tl.keys), wide(&tl.values));
                for i in 0..n {
                    for h in 0..kv {
                        let at = (h * n + i) * dh;
                        cache.append_kv(h, &keys[at..at + dh], &values[at..at + dh])?;
                    }
                }
                let queries = wide(&tl.queries)
                    .chunks(dh)
                    .map(<[f64]>::to_vec)
                    .collect::<Vec<_>>()
                    .chunks(w + 1)
                    .map(<[Vec<f64>]>::to_vec)
                    .collect();
                PrefilledLayer::from_parts(
                    index,
                    cache,
                    queries,
                    Mat::from_vec(d, d, wide(&tl.w_o))?,
                    Mat::from_vec(d, FFN_MULT * d, wide(&tl.ffn_up))?,
                    Mat::from_vec(FFN_MULT * d, d, wide(&tl.ffn_down))?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelSnapshot { config, layers, w_m: Mat::from_vec(d, vocab, wide(&self.w_m))? })
    }
}
