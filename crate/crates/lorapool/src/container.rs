//! Binary container for adapter bundles.
//!
//! Layout: an 8-byte little-endian unsigned integer holding the byte length
//! of a UTF-8 JSON header, the header itself, then a contiguous payload.
//! The header maps each tensor name to `{shape, dtype: "f32", offset,
//! nbytes}` and carries a `__metadata__` object with the adapter id and the
//! per-tensor scaling map. Offsets are relative to the payload start and
//! 8-byte aligned; tensor data is f32 little-endian.
//!
//! Writing is deterministic: header keys are sorted, layout is assigned in
//! sorted name order, so saving the same bundle twice produces identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::tensor::{AdapterBundle, TensorBlob};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    nbytes: u64,
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

/// Serialize a bundle into container bytes.
pub fn bundle_to_bytes(bundle: &AdapterBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut header = Map::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in &bundle.tensors {
        let offset = align8(payload.len());
        payload.resize(offset, 0);
        for &v in &tensor.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let entry = HeaderEntry {
            shape: tensor.shape.clone(),
            dtype: "f32".to_string(),
            offset: offset as u64,
            nbytes: (tensor.data.len() * 4) as u64,
        };
        header.insert(name.clone(), serde_json::to_value(entry).expect("static schema"));
    }
    header.insert(
        METADATA_KEY.to_string(),
        json!({
            "adapter_id": bundle.adapter_id,
            "scaling": bundle.scaling,
        }),
    );
    let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("static schema");
    // Pad the header with spaces so the payload starts 8-byte aligned in
    // the file as well.
    while !(8 + header_bytes.len()).is_multiple_of(8) {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse container bytes back into a bundle.
pub fn bundle_from_bytes(bytes: &[u8]) -> Result<AdapterBundle> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "container too short: {} bytes, need at least 8 for the header length",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("sliced to 8")) as usize;
    let payload_start = 8 + header_len;
    if payload_start > bytes.len() {
        return Err(Error::Format(format!(
            "header declares {header_len} bytes but the file ends at byte {} (payload would start at byte {payload_start})",
            bytes.len()
        )));
    }
    let header: BTreeMap<String, Value> = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut bundle = AdapterBundle::new(String::new());
    let mut scaling: BTreeMap<String, f32> = BTreeMap::new();
    for (name, value) in header {
        if name == METADATA_KEY {
            let meta = value
                .as_object()
                .ok_or_else(|| Error::Format("__metadata__ must be an object".into()))?;
            bundle.adapter_id = meta
                .get("adapter_id")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Format("__metadata__ lacks adapter_id".into()))?
                .to_string();
            if let Some(s) = meta.get("scaling") {
                scaling = serde_json::from_value(s.clone())
                    .map_err(|e| Error::Format(format!("scaling map malformed: {e}")))?;
            }
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("tensor {name}: bad header entry: {e}")))?;
        if entry.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor {name}: unsupported dtype {}, only f32",
                entry.dtype
            )));
        }
        if !entry.offset.is_multiple_of(8) {
            return Err(Error::Format(format!(
                "tensor {name}: offset {} is not 8-byte aligned",
                entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.nbytes as usize != numel * 4 {
            return Err(Error::Format(format!(
                "tensor {name}: shape {:?} implies {} bytes, header says {}",
                entry.shape,
                numel * 4,
                entry.nbytes
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.nbytes as usize;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "tensor {name}: needs payload bytes {start}..{end} (file bytes {}..{}), payload ends at byte {}",
                payload_start + start,
                payload_start + end,
                payload_start + payload.len()
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunked by 4")))
            .collect();
        let blob = TensorBlob {
            name: name.clone(),
            shape: entry.shape,
            data,
        };
        bundle.tensors.insert(name, blob);
    }
    for name in bundle.tensors.keys() {
        let s = scaling.get(name).copied().unwrap_or(1.0);
        bundle.scaling.insert(name.clone(), s);
    }
    Ok(bundle)
}

pub fn save_bundle(bundle: &AdapterBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = bundle_to_bytes(bundle)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<AdapterBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    bundle_from_bytes(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
