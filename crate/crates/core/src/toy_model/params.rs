//! Flat parameter storage with a named tensor directory, plus the versioned
//! binary file format.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

pub const MAGIC: &[u8; 8] = b"DVFPARAM";
pub const FORMAT_VERSION: u32 = 1;

/// Shape of the network. Unlike `ToyConfig` this carries no training knobs,
/// so micro-models for gradient checks can use tiny vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mixer_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub patch_dim: usize,
    pub max_seq: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ModelConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.vocab_size < 2 || self.patch_dim == 0 || self.max_seq == 0 {
            return bad("d_ff, vocab_size, patch_dim and max_seq must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to one tensor in a `Layout`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
pub struct BlockIds {
    pub ln1_g: TensorId,
    pub ln1_b: TensorId,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub ln2_g: TensorId,
    pub ln2_b: TensorId,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
    pub patch_w: TensorId,
    pub patch_b: TensorId,
    pub row_emb: TensorId,
    pub col_emb: TensorId,
    pub tok_emb: TensorId,
    pub text_pos: TensorId,
    pub mixer: Vec<BlockIds>,
    pub decoder: Vec<BlockIds>,
    pub lnf_g: TensorId,
    pub lnf_b: TensorId,
    pub out_w: TensorId,
    pub out_b: TensorId,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize]) -> TensorId {
        let info = TensorInfo {
            name,
            shape: shape.to_vec(),
            offset: self.total,
        };
        self.total += info.len();
        self.tensors.push(info);
        TensorId(self.tensors.len() - 1)
    }

    fn block(&mut self, prefix: &str, d: usize, ff: usize) -> BlockIds {
        let mut t = |n: &str, s: &[usize]| self.add(format!("{prefix}.{n}"), s);
        BlockIds {
            ln1_g: t("ln1.g", &[d]),
            ln1_b: t("ln1.b", &[d]),
            wq: t("attn.wq", &[d, d]),
            wk: t("attn.wk", &[d, d]),
            wv: t("attn.wv", &[d, d]),
            wo: t("attn.wo", &[d, d]),
            bo: t("attn.bo", &[d]),
            ln2_g: t("ln2.g", &[d]),
            ln2_b: t("ln2.b", &[d]),
            w1: t("mlp.w1", &[d, ff]),
            b1: t("mlp.b1", &[ff]),
            w2: t("mlp.w2", &[ff, d]),
            b2: t("mlp.b2", &[d]),
        }
    }
}

impl Layout {
    pub fn new(dims: &ModelDims) -> Self {
        let d = dims.d_model;
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let patch_w = b.add("patch.w".into(), &[dims.patch_dim, d]);
        let patch_b = b.add("patch.b".into(), &[d]);
        let row_emb = b.add("visual.row".into(), &[dims.max_seq, d]);
        let col_emb = b.add("visual.col".into(), &[dims.max_seq, d]);
        let tok_emb = b.add("text.tok".into(), &[dims.vocab_size, d]);
        let text_pos = b.add("text.pos".into(), &[dims.max_seq, d]);
        let mixer = (0..dims.mixer_layers)
            .map(|i| b.block(&format!("mixer.{i}"), d, dims.d_ff))
            .collect();
        let decoder = (0..dims.n_layers)
            .map(|i| b.block(&format!("decoder.{i}"), d, dims.d_ff))
            .collect();
        let lnf_g = b.add("final.ln.g".into(), &[d]);
        let lnf_b = b.add("final.ln.b".into(), &[d]);
        let out_w = b.add("unembed.w".into(), &[d, dims.vocab_size]);
        let out_b = b.add("unembed.b".into(), &[dims.vocab_size]);
        Layout {
            tensors: b.tensors,
            total: b.total,
            patch_w,
            patch_b,
            row_emb,
            col_emb,
            tok_emb,
            text_pos,
            mixer,
            decoder,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
        }
    }

    pub fn info(&self, id: TensorId) -> &TensorInfo {
        &self.tensors[id.0]
    }

    fn range(&self, id: TensorId) -> std::ops::Range<usize> {
        let t = self.info(id);
        t.offset..t.offset + t.len()
    }

    pub fn mat<'a>(&self, data: &'a [f64], id: TensorId) -> ArrayView2<'a, f64> {
        let t = self.info(id);
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &data[self.range(id)])
            .expect("matrix tensor")
    }

    pub fn vec<'a>(&self, data: &'a [f64], id: TensorId) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.range(id)])
    }

    pub fn mat_mut<'a>(&self, data: &'a mut [f64], id: TensorId) -> ArrayViewMut2<'a, f64> {
        let t = self.info(id);
        let shape = (t.shape[0], t.shape[1]);
        ArrayViewMut2::from_shape(shape, &mut data[self.range(id)]).expect("matrix tensor")
    }

    pub fn vec_mut<'a>(&self, data: &'a mut [f64], id: TensorId) -> ArrayViewMut1<'a, f64> {
        let r = self.range(id);
        ArrayViewMut1::from(&mut data[r])
    }
}

#[derive(Debug, Clone)]
pub struct Parameters {
    pub dims: ModelDims,
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl Parameters {
    /// Seeded initialization: matrices ~ N(0, 1/fan_in), residual output
    /// projections further scaled by 1/sqrt(2 * layers), layer-norm gains 1,
    /// biases 0, embeddings ~ N(0, 0.1).
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        let mut values = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = (2 * (dims.n_layers + dims.mixer_layers)).max(1) as f64;
        for t in &layout.tensors {
            let name = t.name.as_str();
            let slot = &mut values[t.offset..t.offset + t.len()];
            let std = if name.ends_with(".g") {
                slot.fill(1.0);
                continue;
            } else if t.shape.len() == 1 {
                continue;
            } else if name.starts_with("visual.") || name.starts_with("text.") {
                0.1
            } else {
                let mut s = 1.0 / (t.shape[0] as f64).sqrt();
                if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                    s /= depth.sqrt();
                }
                s
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in slot.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(Parameters {
            dims,
            layout,
            values,
        })
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn dims_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.dims).expect("dims serialize"))
    }

    /// Versioned binary: magic, version, dims hash, dims JSON, tensor
    /// directory, then little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(self.dims_hash().as_bytes());
        let dims = serde_json::to_vec(&self.dims).expect("dims serialize");
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        out.extend_from_slice(&dims);
        out.extend_from_slice(&(self.layout.tensors.len() as u32).to_le_bytes());
        for t in &self.layout.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &s in &t.shape {
                out.extend_from_slice(&(s as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.offset as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let err = |m: &str| Error::ParamFormat(m.to_string());
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(err("truncated file"));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::ParamFormat(format!("unsupported version {version}")));
        }
        let hash = std::str::from_utf8(take(64)?).map_err(|_| err("bad hash"))?.to_string();
        let dims_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let dims: ModelDims = serde_json::from_slice(take(dims_len)?)?;
        dims.validate()?;
        let layout = Layout::new(&dims);
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if count != layout.tensors.len() {
            return Err(err("tensor directory does not match dims"));
        }
        for expected in &layout.tensors {
            let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(n)?).map_err(|_| err("bad tensor name"))?;
            let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            let offset = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            if name != expected.name || shape != expected.shape || offset != expected.offset {
                return Err(Error::ParamFormat(format!("unexpected tensor entry {name}")));
            }
        }
        let total = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if total != layout.total {
            return Err(err("value count does not match dims"));
        }
        let raw = take(total * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let params = Parameters {
            dims,
            layout,
            values,
        };
        if params.dims_hash() != hash {
            return Err(err("config hash mismatch"));
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite parameter"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            mixer_layers: 1,
            d_ff: 16,
            vocab_size: 16,
            patch_dim: 4,
            max_seq: 12,
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let l = Layout::new(&dims());
        let mut offset = 0;
        for t in &l.tensors {
            assert_eq!(t.offset, offset);
            offset += t.len();
        }
        assert_eq!(offset, l.total);
    }

    #[test]
    fn init_is_seeded() {
        let a = Parameters::init(dims(), 3).unwrap();
        let b = Parameters::init(dims(), 3).unwrap();
        let c = Parameters::init(dims(), 4).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        assert!(a.values.iter().all(|v| v.is_finite()));
        assert!(a.layout.vec(&a.values, a.layout.lnf_g).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let p = Parameters::init(dims(), 1).unwrap();
        let bytes = p.to_bytes();
        let q = Parameters::from_bytes(&bytes).unwrap();
        assert_eq!(q.values, p.values);
        assert_eq!(q.dims, p.dims);

        assert!(Parameters::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Parameters::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[12] ^= 1;
        assert!(Parameters::from_bytes(&bad).is_err());
    }

    #[test]
    fn rejects_bad_dims() {
        let mut d = dims();
        d.n_heads = 3;
        assert!(Parameters::init(d, 0).is_err());
    }
}
