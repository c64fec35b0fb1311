//! Versioned checkpoint files.
//!
//! Layout: 8-byte magic `FIDLCKPT`, u32 LE format version, u64 LE header
//! length, a JSON [`CheckpointHeader`], then every tensor as little-endian
//! f32 in header order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backbone::{BackboneKind, Network};
use super::ProtoError;
use crate::dataset::PreprocessConfig;

const MAGIC: &[u8; 8] = b"FIDLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub backbone: BackboneKind,
    pub embed_dim: usize,
    pub preprocess: PreprocessConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run metadata (episode, validation accuracy, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(
    path: &Path,
    network: &mut Network,
    preprocess: &PreprocessConfig,
    meta: serde_json::Value,
) -> Result<(), ProtoError> {
    let state = network.state();
    let header = CheckpointHeader {
        backbone: network.kind(),
        embed_dim: network.embed_dim(),
        preprocess: preprocess.clone(),
        tensors: state
            .iter()
            .map(|(name, shape, _, trainable)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                trainable: *trainable,
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ProtoError::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("ckpt.tmp");
    let io = |e: std::io::Error| ProtoError::Checkpoint(format!("{}: {e}", path.display()));
    {
        let mut w = BufWriter::new(fs::File::create(&tmp).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes())
            .map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (_, _, values, _) in &state {
            for v in values {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.into_inner()
            .map_err(|e| io(e.into_error()))?
            .sync_all()
            .map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader, ProtoError> {
    let bytes =
        fs::read(path).map_err(|e| ProtoError::Checkpoint(format!("{}: {e}", path.display())))?;
    parse(&bytes).map(|(h, _)| h)
}

fn parse(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), ProtoError> {
    let bad = |m: &str| ProtoError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ProtoError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| ProtoError::Checkpoint(e.to_string()))?;
    Ok((header, &body[len..]))
}

/// Loads a checkpoint. When `expected` is given, a different backbone
/// descriptor is an error.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<BackboneKind>,
) -> Result<(Network, CheckpointHeader), ProtoError> {
    let bytes =
        fs::read(path).map_err(|e| ProtoError::Checkpoint(format!("{}: {e}", path.display())))?;
    let (header, mut data) = parse(&bytes)?;
    if let Some(kind) = expected {
        if kind != header.backbone {
            return Err(ProtoError::DescriptorMismatch {
                expected: kind,
                found: header.backbone,
            });
        }
    }
    let mut values = std::collections::HashMap::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        if data.len() < n * 4 {
            return Err(ProtoError::Checkpoint(format!(
                "truncated data for {}",
                t.name
            )));
        }
        let (chunk, rest) = data.split_at(n * 4);
        values.insert(
            t.name.clone(),
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect::<Vec<f32>>(),
        );
        data = rest;
    }
    if !data.is_empty() {
        return Err(ProtoError::Checkpoint(
            "trailing bytes after tensor data".into(),
        ));
    }
    let mut network = Network::new(header.backbone, 0);
    network.load_named(|name| values.remove(name).map(Ok))?;
    Ok((network, header))
}
