//! Binary adapter checkpoints.
//!
//! ```text
//! "FUMM" | version u32 | count u32 | count × tensor
//! tensor = name_len u32 | name (UTF-8) | ndim u32 | dims u32 × ndim | data f32 × numel
//! ```
//!
//! All integers and floats are little-endian. The encoded size of an
//! adapter set is also its wire size, so [`payload_bytes`] is computed from
//! the same layout.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use crate::adapter::{AdapterSet, LayerRegistry};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{checked_numel, ParamTensor};

pub const MAGIC: [u8; 4] = *b"FUMM";
pub const FORMAT_VERSION: u32 = 1;
/// Magic, version and tensor count.
pub const HEADER_BYTES: usize = 12;

/// Encoded size of one tensor record.
pub fn tensor_record_bytes(t: &ParamTensor) -> usize {
    4 + t.name().len() + 4 + 4 * t.dims().len() + 4 * t.len()
}

/// Exact encoded size of `set`, header included.
pub fn payload_bytes(set: &AdapterSet) -> usize {
    HEADER_BYTES + set.flatten_updates().into_iter().map(tensor_record_bytes).sum::<usize>()
}

fn u32_field(value: usize, name: &str, what: &str) -> std::result::Result<u32, CheckpointError> {
    u32::try_from(value).map_err(|_| CheckpointError::DimOverflow {
        name: name.to_string(),
        detail: format!("{what} {value} does not fit in 32 bits"),
    })
}

/// Encodes tensors in the order given. Values are rounded to `f32`; a value
/// outside the `f32` range is an error rather than a silent infinity.
pub fn encode_tensors(tensors: &[&ParamTensor]) -> Result<Vec<u8>> {
    let size = HEADER_BYTES + tensors.iter().map(|t| tensor_record_bytes(t)).sum::<usize>();
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_field(tensors.len(), "", "tensor count")?.to_le_bytes());
    let mut seen = BTreeSet::new();
    for t in tensors {
        if !seen.insert(t.name()) {
            return Err(CheckpointError::DuplicateName(t.name().to_string()).into());
        }
        out.extend_from_slice(&u32_field(t.name().len(), t.name(), "name length")?.to_le_bytes());
        out.extend_from_slice(t.name().as_bytes());
        out.extend_from_slice(&u32_field(t.dims().len(), t.name(), "ndim")?.to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&u32_field(d, t.name(), "dimension")?.to_le_bytes());
        }
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(CheckpointError::NonFinite(t.name().to_string()).into());
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    debug_assert_eq!(out.len(), size);
    Ok(out)
}

pub fn encode_checkpoint(set: &AdapterSet) -> Result<Vec<u8>> {
    encode_tensors(&set.flatten_updates())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, needed: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.offset;
        if needed > available {
            return Err(CheckpointError::Truncated {
                offset: self.offset,
                needed,
                available,
            });
        }
        let out = &self.bytes[self.offset..self.offset + needed];
        self.offset += needed;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.offset
    }
}

/// Decodes a checkpoint into its tensors, in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Vec<ParamTensor>, CheckpointError> {
    let (_, tensors) = decode_with_version(bytes)?;
    Ok(tensors)
}

fn decode_with_version(bytes: &[u8]) -> std::result::Result<(u32, Vec<ParamTensor>), CheckpointError> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    // The smallest record (empty name, one dim of one element) is 16 bytes.
    let mut tensors = Vec::with_capacity(count.min(r.remaining() / 16));
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name_offset = r.offset;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::InvalidName(name_offset))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim == 0 {
            return Err(CheckpointError::DimOverflow {
                name,
                detail: "tensor has no dimensions".into(),
            });
        }
        let dim_bytes = ndim.checked_mul(4).ok_or_else(|| CheckpointError::DimOverflow {
            name: name.clone(),
            detail: format!("ndim {ndim} overflows"),
        })?;
        let dims: Vec<usize> = r
            .take(dim_bytes)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let numel = checked_numel(&dims).ok_or_else(|| CheckpointError::DimOverflow {
            name: name.clone(),
            detail: format!("dims {dims:?} have a zero or overflowing element count"),
        })?;
        let data_bytes = numel.checked_mul(4).ok_or_else(|| CheckpointError::DimOverflow {
            name: name.clone(),
            detail: format!("{numel} elements overflow the byte count"),
        })?;
        let raw = r.take(data_bytes)?;
        let mut data = Vec::with_capacity(numel);
        for c in raw.chunks_exact(4) {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(CheckpointError::NonFinite(name));
            }
            data.push(f64::from(v));
        }
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName(name));
        }
        tensors.push(ParamTensor::from_parts_unchecked(name, dims, data));
    }
    if r.remaining() > 0 {
        return Err(CheckpointError::TrailingBytes(r.remaining()));
    }
    Ok((version, tensors))
}

/// Rebuilds an adapter set from checkpoint bytes. Modality tags and the
/// LoRA scaling are not stored in the file, so they come from `registry`
/// and `lora_alpha`.
pub fn decode_adapter_set(bytes: &[u8], registry: &LayerRegistry, lora_alpha: f64) -> Result<AdapterSet> {
    let tensors = decode_checkpoint(bytes)?;
    AdapterSet::from_tensors(registry, lora_alpha, tensors).map_err(|e| match e {
        Error::Shape(msg) | Error::InvalidArgument(msg) => CheckpointError::Layout(msg).into(),
        other => other,
    })
}

pub fn save_checkpoint(set: &AdapterSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(set)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, registry: &LayerRegistry, lora_alpha: f64) -> Result<AdapterSet> {
    decode_adapter_set(&std::fs::read(path)?, registry, lora_alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSummary {
    pub name: String,
    pub dims: Vec<usize>,
    pub numel: usize,
    pub l2_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointSummary {
    pub version: u32,
    pub file_bytes: usize,
    pub total_params: usize,
    pub tensors: Vec<TensorSummary>,
}

pub fn inspect(bytes: &[u8]) -> std::result::Result<CheckpointSummary, CheckpointError> {
    let (version, tensors) = decode_with_version(bytes)?;
    let summaries: Vec<TensorSummary> = tensors
        .iter()
        .map(|t| TensorSummary {
            name: t.name().to_string(),
            dims: t.dims().to_vec(),
            numel: t.len(),
            l2_norm: t.norm_sq().sqrt(),
        })
        .collect();
    Ok(CheckpointSummary {
        version,
        file_bytes: bytes.len(),
        total_params: summaries.iter().map(|s| s.numel).sum(),
        tensors: summaries,
    })
}
