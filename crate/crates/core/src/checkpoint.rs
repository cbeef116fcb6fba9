//! Bit-exact model persistence.
//!
//! Container layout: magic `DWPM` | version u32 LE | manifest length u64 LE
//! | UTF-8 JSON manifest | concatenated raw little-endian scalar blobs. All
//! blob offsets are relative to the start of the blob section.

use crate::error::{Error, ParseKind, Result};
use crate::graph::Stage;
use crate::models::{Model, Param, Role};
use crate::tensor::{Dtype, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"DWPM";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ManifestEntry {
    pub name: String,
    pub role: String,
    pub prunable: bool,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    kind: String,
    arch_name: String,
    input_spec: [usize; 3],
    num_classes: usize,
    stages: Vec<Stage>,
    meta: serde_json::Map<String, serde_json::Value>,
    entries: Vec<ManifestEntry>,
}

pub(crate) fn write_container(path: &Path, manifest: &[u8], blob: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + manifest.len() + blob.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(manifest);
    bytes.extend_from_slice(blob);
    std::fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_container(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    split_container(&bytes)
}

pub(crate) fn split_container(bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(Error::parse(
            ParseKind::Truncated,
            format!("container header needs 16 bytes, file holds {}", bytes.len()),
        ));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::parse(
            ParseKind::BadMagic,
            format!("expected magic {:?}, got {:?}", MAGIC, &bytes[0..4]),
        ));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(Error::parse(
            ParseKind::VersionMismatch,
            format!("container version {version}, supported {VERSION}"),
        ));
    }
    let mlen = u64::from_le_bytes([
        bytes[8], bytes[9], bytes[10], bytes[11], bytes[12], bytes[13], bytes[14], bytes[15],
    ]) as usize;
    if 16 + mlen > bytes.len() {
        return Err(Error::parse(
            ParseKind::Truncated,
            format!("manifest of {mlen} bytes exceeds file"),
        ));
    }
    Ok((
        bytes[16..16 + mlen].to_vec(),
        bytes[16 + mlen..].to_vec(),
    ))
}

/// Serialize a model; `read_checkpoint(write_checkpoint(m))` is bit-identical
/// to `m`, including prunable flags and metadata.
pub fn write_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(model.params.len());
    let mut blob = Vec::new();
    for p in &model.params {
        let offset = blob.len() as u64;
        for &v in p.values.data() {
            v.write_le(&mut blob);
        }
        entries.push(ManifestEntry {
            name: p.name.clone(),
            role: match p.role {
                Role::Kernel => "kernel".to_string(),
                Role::Bias => "bias".to_string(),
            },
            prunable: p.prunable,
            shape: p.values.shape().to_vec(),
            dtype: T::DTYPE,
            byte_offset: offset,
            byte_len: blob.len() as u64 - offset,
        });
    }
    let manifest = ModelManifest {
        kind: "model".to_string(),
        arch_name: model.arch_name.clone(),
        input_spec: [model.input_spec.0, model.input_spec.1, model.input_spec.2],
        num_classes: model.num_classes,
        stages: model.stages.clone(),
        meta: model.meta.clone(),
        entries,
    };
    write_container(path, &serde_json::to_vec(&manifest)?, &blob)
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let (manifest_bytes, blob) = read_container(path)?;
    let manifest: ModelManifest = serde_json::from_slice(&manifest_bytes).map_err(|e| {
        Error::parse(ParseKind::Manifest, format!("manifest json: {e}"))
    })?;
    if manifest.kind != "model" {
        return Err(Error::parse(
            ParseKind::Manifest,
            format!("container holds {:?}, expected a model", manifest.kind),
        ));
    }
    let mut params = Vec::with_capacity(manifest.entries.len());
    let mut total = 0u64;
    for e in &manifest.entries {
        if e.dtype != T::DTYPE {
            return Err(Error::parse(
                ParseKind::Manifest,
                format!("entry {} stored as {:?}, requested {:?}", e.name, e.dtype, T::DTYPE),
            ));
        }
        let count: usize = e.shape.iter().product();
        let want = (count * e.dtype.size_bytes()) as u64;
        if e.byte_len != want {
            return Err(Error::parse(
                ParseKind::LengthMismatch,
                format!("entry {}: {} bytes declared, shape needs {want}", e.name, e.byte_len),
            ));
        }
        let start = e.byte_offset as usize;
        let end = start + e.byte_len as usize;
        if end > blob.len() {
            return Err(Error::parse(
                ParseKind::Truncated,
                format!(
                    "entry {} spans bytes {start}..{end}, blob holds {}",
                    e.name,
                    blob.len()
                ),
            ));
        }
        total += e.byte_len;
        let step = e.dtype.size_bytes();
        let data: Vec<T> = blob[start..end]
            .chunks_exact(step)
            .map(T::read_le)
            .collect();
        params.push(Param {
            name: e.name.clone(),
            role: match e.role.as_str() {
                "kernel" => Role::Kernel,
                "bias" => Role::Bias,
                other => {
                    return Err(Error::parse(
                        ParseKind::Manifest,
                        format!("entry {}: unknown role {other:?}", e.name),
                    ))
                }
            },
            prunable: e.prunable,
            values: Tensor::new(e.shape.clone(), data)?,
        });
    }
    if total != blob.len() as u64 {
        return Err(Error::parse(
            ParseKind::LengthMismatch,
            format!("manifest declares {total} blob bytes, file holds {}", blob.len()),
        ));
    }
    let mut model = Model::new(
        manifest.arch_name,
        (
            manifest.input_spec[0],
            manifest.input_spec[1],
            manifest.input_spec[2],
        ),
        manifest.num_classes,
        manifest.stages,
        params,
    )?;
    model.meta = manifest.meta;
    Ok(model)
}
