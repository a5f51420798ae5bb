//! Named-tensor archive for an adapted model.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then the
//! payload. The header maps each parameter name to `{dtype, shape, offset}`
//! (offset in bytes from the start of the payload) and carries the model
//! config and adapter plan. Payloads are row-major little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptedModel, AdapterPlan};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Vlsm};

const DTYPE: &str = "f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    pub adapter: AdapterPlan,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// Serializes every parameter, frozen and trainable, in name order.
pub fn to_bytes(model: &AdaptedModel) -> Result<Vec<u8>> {
    let mut params = model.params();
    params.sort_by(|a, b| a.name.cmp(&b.name));
    let mut tensors = BTreeMap::new();
    let mut payload = Vec::new();
    for p in &params {
        let entry = TensorEntry { dtype: DTYPE.into(), shape: p.shape().to_vec(), offset: payload.len() as u64 };
        if tensors.insert(p.name.clone(), entry).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter name {}", p.name)));
        }
        for &v in p.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header { model: model.config().clone(), adapter: model.plan.clone(), tensors };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save(model: &AdaptedModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let len = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| Error::Checkpoint("file shorter than its length prefix".into()))?;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::Checkpoint(format!("header of {len} bytes runs past end of file")))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    Ok((header, &bytes[8 + len..]))
}

/// Rebuilds the model described by the header and loads every tensor.
/// Missing, extra or misshapen tensors are errors.
pub fn from_bytes(bytes: &[u8]) -> Result<AdaptedModel> {
    let (header, payload) = read_header(bytes)?;
    let backbone = Vlsm::new(header.model.clone(), 0)?;
    let mut model = AdaptedModel::attach(header.adapter.clone(), backbone, 0)?;
    let mut seen = 0;
    for p in model.params_mut() {
        let entry = header
            .tensors
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
        if entry.dtype != DTYPE {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", p.name, entry.dtype)));
        }
        if entry.shape != p.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: stored shape {:?} but model expects {:?}",
                p.name,
                entry.shape,
                p.shape()
            )));
        }
        let start = entry.offset as usize;
        let raw = payload
            .get(start..start + 4 * p.numel())
            .ok_or_else(|| Error::Checkpoint(format!("{}: payload truncated", p.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        p.assign(data);
        seen += 1;
    }
    if seen != header.tensors.len() {
        let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
        let extra: Vec<&String> = header.tensors.keys().filter(|k| !names.contains(k)).collect();
        return Err(Error::Checkpoint(format!("unexpected tensors {extra:?}")));
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<AdaptedModel> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterKind, Variant};

    fn tiny() -> AdaptedModel {
        let plan = AdapterPlan::new(Variant::VLC, AdapterKind::Dense, 2);
        AdaptedModel::attach(plan, Vlsm::new(ModelConfig::tiny(), 5).unwrap(), 5).unwrap()
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let bytes = to_bytes(&tiny()).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        assert!(back.params().iter().all(|p| p.trainable() == p.name.starts_with("adapters.")));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = to_bytes(&tiny()).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..4]), Err(Error::Checkpoint(_))));
    }
}
