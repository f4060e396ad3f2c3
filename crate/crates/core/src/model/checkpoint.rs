//! Checkpoint container: 8-byte magic `KVFUSE01`, a little-endian u32 length
//! prefix, a UTF-8 JSON header (kind, metadata, ordered tensor manifest with
//! name/shape/byte-offset), then the raw little-endian f32 data in manifest
//! order. Save -> load -> save is bit-exact.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{LayerParams, Model, ModelConfig};
use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;

const MAGIC: &[u8; 8] = b"KVFUSE01";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    manifest: Vec<ManifestEntry>,
}

pub(crate) struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub(crate) fn write_container(
    kind: &str,
    meta: Value,
    tensors: &[(String, &Tensor)],
) -> Vec<u8> {
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.numel() * 4) as u64;
    }
    let header = Header {
        kind: kind.to_string(),
        meta,
        manifest,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serialization");
    let mut out = Vec::with_capacity(12 + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn parse_container(bytes: &[u8]) -> Result<(String, Value, Vec<RawTensor>)> {
    if bytes.len() < 12 {
        return Err(Error::Checkpoint(format!(
            "truncated: {} bytes is shorter than the fixed prelude",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..8],
            MAGIC
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Checkpoint(format!(
            "truncated header: need {} bytes, have {}",
            12 + header_len,
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::Checkpoint(format!("invalid header JSON: {e}")))?;
    let data = &bytes[12 + header_len..];
    let mut tensors = Vec::with_capacity(header.manifest.len());
    let mut expected_offset = 0u64;
    for entry in &header.manifest {
        if entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "manifest entry {} at offset {} but data is contiguous up to {}",
                entry.name, entry.offset, expected_offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let nbytes = numel * 4;
        let start = entry.offset as usize;
        if data.len() < start + nbytes {
            return Err(Error::Checkpoint(format!(
                "truncated data for tensor {}: need {} bytes past offset {start}, have {}",
                entry.name,
                nbytes,
                data.len().saturating_sub(start)
            )));
        }
        let mut vals = Vec::with_capacity(numel);
        for chunk in data[start..start + nbytes].chunks_exact(4) {
            vals.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.push(RawTensor {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data: vals,
        });
        expected_offset += nbytes as u64;
    }
    if data.len() as u64 != expected_offset {
        return Err(Error::Checkpoint(format!(
            "data section is {} bytes but manifest covers {expected_offset}",
            data.len()
        )));
    }
    Ok((header.kind, header.meta, tensors))
}

fn expected_manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden_dim;
    let mut out = vec![("token_embedding".to_string(), vec![config.vocab_size, h])];
    for i in 0..config.n_layers {
        out.push((format!("layers.{i}.attn_norm"), vec![h]));
        out.push((format!("layers.{i}.wq"), vec![h, h]));
        out.push((format!("layers.{i}.wk"), vec![h, h]));
        out.push((format!("layers.{i}.wv"), vec![h, h]));
        out.push((format!("layers.{i}.wo"), vec![h, h]));
        out.push((format!("layers.{i}.mlp_norm"), vec![h]));
        out.push((format!("layers.{i}.w_gate"), vec![h, config.mlp_dim]));
        out.push((format!("layers.{i}.w_up"), vec![h, config.mlp_dim]));
        out.push((format!("layers.{i}.w_down"), vec![config.mlp_dim, h]));
    }
    out.push(("final_norm".to_string(), vec![h]));
    if !config.tied_output {
        out.push(("lm_head".to_string(), vec![h, config.vocab_size]));
    }
    out
}

/// Serialize a model (config, frozen flag, and all parameters).
pub fn save_model(model: &Model) -> Vec<u8> {
    let meta = serde_json::json!({
        "config": model.config,
        "frozen": model.frozen(),
    });
    let params = model.named_params();
    let tensors: Vec<(String, &Tensor)> = params
        .iter()
        .map(|(name, t)| (name.clone(), t.as_ref()))
        .collect();
    write_container("model", meta, &tensors)
}

/// Parse a model checkpoint. Fails without constructing a partial model on
/// any mismatch between the manifest and the config's expected layout.
pub fn load_model(bytes: &[u8]) -> Result<Model> {
    let (kind, meta, raw) = parse_container(bytes)?;
    if kind != "model" {
        return Err(Error::Checkpoint(format!(
            "container kind {kind:?}, expected \"model\""
        )));
    }
    let config: ModelConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("header missing config".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("invalid config in header: {e}")))?;
    config.validate()?;
    let frozen = meta
        .get("frozen")
        .and_then(Value::as_bool)
        .ok_or_else(|| Error::Checkpoint("header missing frozen flag".into()))?;

    let expected = expected_manifest(&config);
    if raw.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "manifest has {} tensors, config requires {}",
            raw.len(),
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(raw.len());
    for (rt, (name, shape)) in raw.into_iter().zip(&expected) {
        if &rt.name != name || &rt.shape != shape {
            return Err(Error::Checkpoint(format!(
                "manifest entry {:?} {:?} does not match expected {:?} {:?}",
                rt.name, rt.shape, name, shape
            )));
        }
        let mut t = Tensor::new(rt.shape, rt.data)?;
        t.requires_grad = !frozen;
        tensors.push(Arc::new(t));
    }

    let mut iter = tensors.into_iter();
    let token_embedding = iter.next().unwrap();
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerParams {
            attn_norm: iter.next().unwrap(),
            wq: iter.next().unwrap(),
            wk: iter.next().unwrap(),
            wv: iter.next().unwrap(),
            wo: iter.next().unwrap(),
            mlp_norm: iter.next().unwrap(),
            w_gate: iter.next().unwrap(),
            w_up: iter.next().unwrap(),
            w_down: iter.next().unwrap(),
        });
    }
    let final_norm = iter.next().unwrap();
    let lm_head = if config.tied_output {
        None
    } else {
        Some(iter.next().unwrap())
    };
    let mut model = Model {
        config,
        token_embedding,
        layers,
        final_norm,
        lm_head,
        frozen: false,
    };
    if frozen {
        model.freeze();
    }
    Ok(model)
}

pub fn save_model_file<P: AsRef<Path>>(model: &Model, path: P) -> Result<()> {
    std::fs::write(path, save_model(model))?;
    Ok(())
}

pub fn load_model_file<P: AsRef<Path>>(path: P) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    load_model(&bytes)
}
