//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "SLKC", version u16, header_len u32, header (JSON text),
//!   then per parameter: name_len u16, name bytes, rank u8, dims u32 each,
//!   element precision u8 (4 or 8), raw elements; trailing CRC32 of all
//!   preceding bytes.

use super::{Feature, LayerKind, Model};
use crate::tensor::{Elem, Shape3, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLKC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("bad magic or unsupported checkpoint format version")]
    FormatVersionMismatch,
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint stores {found}-byte elements, expected {expected}")]
    PrecisionMismatch { found: u8, expected: u8 },
}

/// Self-describing header: the layer chain plus free-form training metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub input: Shape3,
    pub layers: Vec<LayerKind>,
    pub elem_bytes: u8,
    #[serde(default)]
    pub meta: CheckpointMeta,
}

pub type CheckpointMeta = BTreeMap<String, String>;

fn push_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn elem_bytes<T: Elem>(t: &Tensor<T>, buf: &mut Vec<u8>) {
    for &v in t.data() {
        match T::BYTES {
            4 => buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
            8 => buf.extend_from_slice(&v.to_f64().to_le_bytes()),
            _ => unreachable!("element precision is 4 or 8"),
        }
    }
}

pub fn encode_checkpoint<T: Elem>(model: &Model<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let header = CheckpointHeader {
        input: model.input,
        layers: model.layers.iter().map(|l| l.kind.clone()).collect(),
        elem_bytes: T::BYTES,
        meta: meta.clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u16(&mut buf, CHECKPOINT_VERSION);
    push_u32(&mut buf, header_json.len() as u32);
    buf.extend_from_slice(&header_json);
    for (li, layer) in model.layers.iter().enumerate() {
        let names = super::param_names(&layer.kind);
        for (pi, p) in layer.params.iter().enumerate() {
            let name = format!("layer{li}.{}", names[pi]);
            push_u16(&mut buf, name.len() as u16);
            buf.extend_from_slice(name.as_bytes());
            buf.push(p.shape().len() as u8);
            for &d in p.shape() {
                push_u32(&mut buf, d as u32);
            }
            buf.push(T::BYTES);
            elem_bytes(p, &mut buf);
        }
    }
    let crc = crc32fast::hash(&buf);
    push_u32(&mut buf, crc);
    buf
}

pub fn save_checkpoint<T: Elem>(
    model: &Model<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(model, meta);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Malformed("record past end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode_checkpoint<T: Elem>(
    bytes: &[u8],
) -> Result<(Model<T>, CheckpointMeta), CheckpointError> {
    if bytes.len() < 6 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::FormatVersionMismatch);
    }
    if u16::from_le_bytes([bytes[4], bytes[5]]) != CHECKPOINT_VERSION {
        return Err(CheckpointError::FormatVersionMismatch);
    }
    if bytes.len() < 14 {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let mut cur = Cursor { buf: body, pos: 6 };
    let header_len = cur.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    if header.elem_bytes != T::BYTES {
        return Err(CheckpointError::PrecisionMismatch {
            found: header.elem_bytes,
            expected: T::BYTES,
        });
    }

    let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    while cur.pos < body.len() {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("non-utf8 parameter name".into()))?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let prec = cur.u8()?;
        if prec != T::BYTES {
            return Err(CheckpointError::PrecisionMismatch {
                found: prec,
                expected: T::BYTES,
            });
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * prec as usize)?;
        let data: Vec<T> = match prec {
            4 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            8 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            other => {
                return Err(CheckpointError::Malformed(format!(
                    "element precision {other}"
                )))
            }
        };
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("parameter {name}: {e}")))?;
        params.insert(name, t);
    }

    // Rebuild the chain and fill parameters by name.
    let mut shapes = vec![Feature::Chw(header.input)];
    for (i, kind) in header.layers.iter().enumerate() {
        let next = super::layer_out_shape(kind, shapes[i], i)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        shapes.push(next);
    }
    let mut model: Model<T> = super::build_chain(header.input, &header.layers, &shapes, 0);
    for (li, layer) in model.layers.iter_mut().enumerate() {
        let names = super::param_names(&layer.kind);
        for (pi, slot) in layer.params.iter_mut().enumerate() {
            let name = format!("layer{li}.{}", names[pi]);
            let t = params
                .remove(&name)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(CheckpointError::Malformed(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
    }
    if let Some(extra) = params.into_keys().next() {
        return Err(CheckpointError::Malformed(format!(
            "unknown parameter {extra}"
        )));
    }
    Ok((model, header.meta))
}

pub fn load_checkpoint<T: Elem>(path: &Path) -> Result<(Model<T>, CheckpointMeta), CheckpointError> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}
