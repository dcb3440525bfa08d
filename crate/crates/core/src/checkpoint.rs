//! Single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MFTC"                     magic
//! u16                        format version
//! u32 + bytes                header: UTF-8 JSON (config, adapters, method, metrics)
//! u32                        tensor count
//! per tensor:
//!   u16 + bytes              name
//!   u8                       dtype (1 = f64)
//!   u8 + u64 * ndim          shape
//!   u64                      byte offset into the payload section
//! payload                    raw f64 values, in directory order
//! u64                        checksum: first 8 bytes of SHA-256 over all preceding bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::{MaskSpec, MaskedLinear, ScoreMatrix};
use crate::model::{LinearSlot, LowRankLinear, ModelConfig, SlotId, ToyVlm, TrainRegime};
use crate::tensor::Tensor;
use crate::training::{Method, Metrics, TrainConfig};

pub const MAGIC: &[u8; 4] = b"MFTC";
pub const VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;

/// A model plus the provenance needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ToyVlm,
    pub regime: TrainRegime,
    pub method: Option<Method>,
    pub train_config: Option<TrainConfig>,
    pub metrics: Vec<Metrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum AdapterRecord {
    Mask { spec: MaskSpec },
    LowRank { rank: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    regime: TrainRegime,
    method: Option<Method>,
    train_config: Option<TrainConfig>,
    adapters: Vec<(String, AdapterRecord)>,
    metrics: Vec<Metrics>,
}

impl Checkpoint {
    /// A frozen base checkpoint with no training provenance.
    pub fn frozen(model: ToyVlm) -> Self {
        Checkpoint {
            model,
            regime: TrainRegime::Frozen,
            method: None,
            train_config: None,
            metrics: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let adapters = self
            .model
            .slot_ids()
            .into_iter()
            .filter_map(|id| {
                let rec = match self.model.slot(id)? {
                    LinearSlot::Plain(_) => return None,
                    LinearSlot::Masked(m) => AdapterRecord::Mask { spec: m.spec },
                    LinearSlot::LowRank(l) => AdapterRecord::LowRank { rank: l.rank() },
                };
                Some((id.prefix(), rec))
            })
            .collect();
        let header = Header {
            model_config: self.model.config.clone(),
            regime: self.regime,
            method: self.method,
            train_config: self.train_config.clone(),
            adapters,
            metrics: self.metrics.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let tensors = self.model.named_tensors();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, _, t) in &tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.shape().len() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.len() as u64;
        }
        for (_, _, t) in &tensors {
            out.extend_from_slice(&t.to_le_bytes());
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 8 {
            return Err(Error::Format("file too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = checksum(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            if r.u8()? != DTYPE_F64 {
                return Err(Error::Format(format!("{name}: unsupported dtype")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            dir.push((name, shape, offset));
        }
        let payload = &body[r.pos..];
        let mut tensors = std::collections::HashMap::with_capacity(count);
        for (name, shape, offset) in dir {
            let n: usize = shape.iter().product();
            let raw = payload
                .get(offset..offset + 8 * n)
                .ok_or_else(|| Error::Format(format!("{name}: payload out of bounds")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }

        let mut model = ToyVlm::build(&header.model_config, 0)?;
        for (prefix, rec) in &header.adapters {
            let id = model
                .slot_ids()
                .into_iter()
                .find(|id| &id.prefix() == prefix)
                .ok_or_else(|| Error::Format(format!("unknown sublayer `{prefix}`")))?;
            attach_placeholder(&mut model, id, rec)?;
        }
        let mut missing = None;
        model.visit_mut(&mut |name, _, t| match tensors.remove(name) {
            Some(v) if v.shape() == t.shape() => *t = v,
            _ => {
                missing.get_or_insert_with(|| name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::Format(format!("tensor `{name}` missing or mis-shaped")));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(Checkpoint {
            model,
            regime: header.regime,
            method: header.method,
            train_config: header.train_config,
            metrics: header.metrics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<u64> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(stored_checksum(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checksum of the serialized form.
    pub fn content_hash(&self) -> Result<u64> {
        Ok(stored_checksum(&self.to_bytes()?))
    }
}

fn attach_placeholder(model: &mut ToyVlm, id: SlotId, rec: &AdapterRecord) -> Result<()> {
    let slot = model.slot_mut(id).expect("listed slot");
    let w = slot.frozen_weight().clone();
    let (out, inp) = w.dims2()?;
    *slot = match *rec {
        AdapterRecord::Mask { spec } => {
            let scores = ScoreMatrix::new(Tensor::zeros(w.shape()), format!("{}.weight", id.prefix()))?;
            LinearSlot::Masked(MaskedLinear::new(w, None, scores, spec)?)
        }
        AdapterRecord::LowRank { rank } => {
            if rank == 0 {
                return Err(Error::Format(format!("{}: zero adapter rank", id.prefix())));
            }
            LinearSlot::LowRank(LowRankLinear {
                frozen_weight: w,
                down: Tensor::zeros(&[rank, inp]),
                up: Tensor::zeros(&[out, rank]),
            })
        }
    };
    Ok(())
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn stored_checksum(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"))
}

/// Reads the stored checksum of a checkpoint file without validating it.
pub fn file_checksum(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Format("file too short".into()));
    }
    Ok(stored_checksum(&bytes))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
