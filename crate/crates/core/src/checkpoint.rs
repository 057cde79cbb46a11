//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "CLRFYCK1"
//! header_len u64 LE
//! header     UTF-8 JSON (CheckpointMeta)
//! n_params   u32 LE
//! repeated n_params times:
//!   name_len u32 LE, name UTF-8
//!   ndim     u32 LE, dims u64 LE × ndim
//!   count    u64 LE, values f64 LE × count
//! ```
//!
//! `content_hash` in the header is the SHA-256 of everything after the header.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::heads::Task;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"CLRFYCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint content hash mismatch: header says {expected}, data hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("architecture mismatch on {field}: checkpoint has {found}, expected {expected}")]
    DimensionMismatch {
        field: String,
        expected: String,
        found: String,
    },
    #[error("checkpoint lacks parameter {0:?}")]
    MissingParam(String),
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing component: {0}")]
    MissingComponent(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHeadMeta {
    pub task: Task,
    pub dropout_p: f64,
    pub lm_head_reuse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub backbone: BackboneConfig,
    /// Activation inside the pre-trained head.
    pub lm_activation: String,
    pub has_lm_head: bool,
    pub has_rtd_head: bool,
    pub task_head: Option<TaskHeadMeta>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub architecture: Architecture,
    /// Token strings indexed by id.
    pub vocab: Vec<String>,
    pub provenance: Provenance,
    #[serde(default)]
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub meta: CheckpointMeta,
    pub params: ParamStore<F>,
}

/// Whether a parameter named `name` takes weight decay.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with("_emb")
}

/// Looks up `name` and checks its shape.
pub fn expect_param<F: Scalar>(
    store: &ParamStore<F>,
    name: &str,
    shape: &[usize],
) -> crate::Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| CheckpointError::MissingParam(name.to_string()))?;
    let found = store.get(id).tensor.shape();
    if found != shape {
        return Err(CheckpointError::ParamShape {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: found.to_vec(),
        }
        .into());
    }
    Ok(id)
}

fn encode_params<F: Scalar>(store: &ParamStore<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(p.tensor.len() as u64).to_le_bytes());
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                CheckpointError::Corrupt(format!(
                    "truncated while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len().saturating_mul(8))
            .ok_or_else(|| CheckpointError::Corrupt(format!("implausible {what} {v}")))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over an arbitrary string, used for config provenance.
pub fn hash_text(text: &str) -> String {
    sha256_hex(text.as_bytes())
}

impl<F: Scalar> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let body = encode_params(&self.params);
        let mut meta = self.meta.clone();
        meta.content_hash = sha256_hex(&body);
        let header = serde_json::to_vec(&meta).expect("metadata serialises");
        let mut out = Vec::with_capacity(16 + header.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> crate::Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(CheckpointError::Corrupt("bad magic".into()).into());
        }
        let hlen = r.len("header length")?;
        let header = r.take(hlen, "header")?;
        let meta: CheckpointMeta = serde_json::from_slice(header)
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Corrupt(format!(
                "unsupported format version {}",
                meta.format_version
            ))
            .into());
        }
        let body_start = r.pos;
        let n = r.u32("parameter count")?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| CheckpointError::Corrupt("parameter name not UTF-8".into()))?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.len("dimension")?);
            }
            let count = r.len("value count")?;
            let raw = r.take(count * 8, "values")?;
            let data: Vec<F> = raw
                .chunks_exact(8)
                .map(|c| F::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Corrupt(format!("parameter {name}: {e}")))?;
            let decay = decays(&name);
            params
                .add(name, tensor, decay)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            ))
            .into());
        }
        let actual = sha256_hex(&bytes[body_start..]);
        if actual != meta.content_hash {
            return Err(CheckpointError::HashMismatch {
                expected: meta.content_hash.clone(),
                actual,
            }
            .into());
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Content hash of the parameter section as it would be written.
    pub fn content_hash(&self) -> String {
        sha256_hex(&encode_params(&self.params))
    }

    /// Refuses a checkpoint whose backbone differs from `expected`.
    pub fn check_backbone(&self, expected: &BackboneConfig) -> Result<(), CheckpointError> {
        let found = &self.meta.architecture.backbone;
        let fields: [(&str, usize, usize); 6] = [
            ("vocab_size", expected.vocab_size, found.vocab_size),
            ("d_model", expected.d_model, found.d_model),
            ("n_layers", expected.n_layers, found.n_layers),
            ("n_heads", expected.n_heads, found.n_heads),
            ("d_ff", expected.d_ff, found.d_ff),
            ("max_seq_len", expected.max_seq_len, found.max_seq_len),
        ];
        for (field, e, f) in fields {
            if e != f {
                return Err(CheckpointError::DimensionMismatch {
                    field: field.to_string(),
                    expected: e.to_string(),
                    found: f.to_string(),
                });
            }
        }
        Ok(())
    }
}
