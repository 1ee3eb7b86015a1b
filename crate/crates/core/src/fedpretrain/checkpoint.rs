//! Binary checkpoint of the shared weights.
//!
//! Layout (little-endian):
//!
//! ```text
//! "XTB1" | version u32 | variant u8 | n_blocks u16 | d u16 | n_heads u16 | tensor_count u32
//! per tensor: name_len u16 | name utf-8 | ndim u8 | dims u64 * ndim | f32 * numel
//! metadata_len u32 | metadata JSON
//! crc32 of everything above, u32
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ShareMode;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, BackboneVariant};
use crate::objectives::ObjectiveKind;
use crate::tensor::{Float, ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"XTB1";
pub const FORMAT_VERSION: u32 = 1;

/// Pretraining provenance stored after the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub rounds: usize,
    pub objectives: Vec<ObjectiveKind>,
    pub seed: u64,
    pub share_mode: ShareMode,
    pub config_hash: String,
    pub attn_dropout: f64,
    pub ff_dropout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub backbone: BackboneConfig,
    /// Shared tensors in server order.
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| err(format!("file truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| err(format!("{what} {v} does not fit the header field")))
}

impl Checkpoint {
    /// Shared tensors of `params` (those flagged `shared`), cast to f32.
    pub fn from_params<F: Float>(backbone: BackboneConfig, params: &ParamSet<F>, meta: CheckpointMeta) -> Self {
        let tensors =
            params.shared().map(|(n, p)| (n.to_string(), p.tensor.cast::<f32>().with_requires_grad(false))).collect();
        Self { backbone, tensors, meta }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let b = &self.backbone;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(b.variant.code());
        out.extend_from_slice(&narrow::<u16>(b.n_blocks, "n_blocks")?.to_le_bytes());
        out.extend_from_slice(&narrow::<u16>(b.d, "d")?.to_le_bytes());
        out.extend_from_slice(&narrow::<u16>(b.n_heads, "n_heads")?.to_le_bytes());
        out.extend_from_slice(&narrow::<u32>(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&narrow::<u16>(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(narrow::<u8>(t.shape().len(), "rank")?);
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&narrow::<u32>(meta.len(), "metadata length")?.to_le_bytes());
        out.extend_from_slice(&meta);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..4] != MAGIC {
            return Err(err("not a checkpoint (bad magic bytes)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(err("checksum mismatch (file corrupt or truncated)"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(err(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
        }
        let variant = BackboneVariant::from_code(r.u8("variant")?)?;
        let n_blocks = r.u16("n_blocks")? as usize;
        let d = r.u16("d")? as usize;
        let n_heads = r.u16("n_heads")? as usize;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| err("tensor name is not UTF-8"))?;
            let ndim = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64("dimension")?).map_err(|_| err("dimension overflows"))?);
            }
            let numel =
                shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| err("tensor too large"))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| err("tensor too large"))?, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((name.to_string(), Tensor::new(shape, data)?));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| err(format!("bad metadata: {e}")))?;
        if r.pos != body.len() {
            return Err(err(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let backbone = BackboneConfig {
            variant,
            n_blocks,
            d,
            n_heads,
            attn_dropout: meta.attn_dropout,
            ff_dropout: meta.ff_dropout,
        };
        Ok(Self { backbone, tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::Data { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Data { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_bytes(&bytes).map_err(|e| Error::Data { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Errors unless `config` matches the stored architecture.
    pub fn check_compatible(&self, config: &BackboneConfig) -> Result<()> {
        let b = &self.backbone;
        let mut diffs = Vec::new();
        if b.variant != config.variant {
            diffs.push(format!("variant {} vs {}", b.variant, config.variant));
        }
        for (what, ours, theirs) in
            [("n_blocks", b.n_blocks, config.n_blocks), ("d", b.d, config.d), ("n_heads", b.n_heads, config.n_heads)]
        {
            if ours != theirs {
                diffs.push(format!("{what} {ours} vs {theirs}"));
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(err(format!("checkpoint does not match the model (checkpoint vs model): {}", diffs.join(", "))))
        }
    }

    /// Copies every stored tensor into `params`, which must hold each name
    /// with the same shape.
    pub fn apply_to<F: Float>(&self, config: &BackboneConfig, params: &mut ParamSet<F>) -> Result<()> {
        self.check_compatible(config)?;
        for (name, t) in &self.tensors {
            let dst = params.get(name).ok_or_else(|| err(format!("model has no parameter `{name}`")))?;
            if dst.tensor.shape() != t.shape() {
                return Err(err(format!(
                    "`{name}` has shape {:?} in the checkpoint and {:?} in the model",
                    t.shape(),
                    dst.tensor.shape()
                )));
            }
            params.assign(name, &t.cast::<F>())?;
        }
        Ok(())
    }
}
