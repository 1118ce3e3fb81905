//! Named-tensor checkpoint with optimizer state.
//!
//! Little-endian layout:
//!
//! ```text
//! "MFCK"                      magic
//! u32                         format version
//! u64                         optimizer step
//! u32 + bytes                 JSON {"config": RunConfig, "vocabulary": [..]}
//! u32                         tensor count
//! per tensor:
//!   u32 + bytes               UTF-8 name
//!   u32                       ndim
//!   u64 × ndim                dims
//!   f64 × numel               value
//!   f64 × numel               first moment
//!   f64 × numel               second moment
//! u32                         CRC32 of every preceding byte
//! ```
//!
//! Encoding is canonical, so save → load → save is byte-stable.

use std::path::Path;

use medflip_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoders::{MedFlipModel, ParamSet};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::vocab::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MFCK";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Fully resolved run configuration (vocabulary size filled in).
    pub config: RunConfig,
    pub vocabulary: Vocabulary,
    pub params: ParamSet,
    pub optimizer: AdamW,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: RunConfig,
    vocabulary: Vocabulary,
}

/// CRC32 over parameter names and values; identifies a parameter state.
pub fn params_checksum(params: &ParamSet) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(&v.to_le_bytes());
        }
    }
    h.finalize()
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn model(&self) -> MedFlipModel {
        MedFlipModel {
            config: self.config.model.clone(),
            params: self.params.clone(),
        }
    }

    /// Short identifier of the parameter state.
    pub fn id(&self) -> String {
        format!("{:08x}", params_checksum(&self.params))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
        })
        .expect("metadata serialises");
        put_bytes(&mut out, &meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (i, (name, t)) in self.params.iter().enumerate() {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for src in [t, &self.optimizer.m[i], &self.optimizer.v[i]] {
                for v in src.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 + 4 + 4 {
            return Err(Error::Checkpoint(format!("truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { bytes: body, at: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("version {version}, expected {CHECKPOINT_VERSION}")));
        }
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
            return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted)".into()));
        }
        let step = r.u64()?;
        let meta_len = r.u32()? as usize;
        let meta: Meta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        meta.config.validate()?;

        let count = r.u32()? as usize;
        let mut params = ParamSet::default();
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let read = |r: &mut Reader<'_>| -> Result<Tensor> {
                let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Ok(Tensor::new(shape.clone(), data)?)
            };
            let value = read(&mut r)?;
            m.push(read(&mut r)?);
            v.push(read(&mut r)?);
            params.push(name, value);
        }
        if r.at != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.at)));
        }

        // The tensor table must match what the configuration implies.
        let expected = MedFlipModel::new(&meta.config.model, 0)?;
        let same_layout = expected.params.names() == params.names()
            && expected.params.tensors().iter().zip(params.tensors()).all(|(a, b)| a.shape() == b.shape());
        if !same_layout {
            return Err(Error::Checkpoint("tensor table does not match the model configuration".into()));
        }

        let t = &meta.config.train;
        Ok(Self {
            optimizer: AdamW {
                lr: t.learning_rate,
                weight_decay: t.weight_decay,
                step,
                m,
                v,
            },
            config: meta.config,
            vocabulary: meta.vocabulary,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated at byte {}", self.at))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
