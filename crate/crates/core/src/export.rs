//! Artifact export: 8-bit PGM/PPM images and the adversarial-batch
//! container (same binary framing as checkpoints, with a batch manifest).

use crate::checkpoint::{read_container, write_container};
use crate::error::{Error, ParseKind, Result};
use crate::tensor::{Dtype, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[H,W]` tensor of unit-range values as a binary PGM (P5).
pub fn write_pgm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    if image.shape().len() != 2 {
        return Err(Error::shape("pgm image", &[0, 0], image.shape()));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|v| quantize_unit(v.to_f64())));
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Write a `[3,H,W]` tensor of unit-range values as a binary PPM (P6).
pub fn write_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape("ppm image", &[3, 0, 0], image.shape()));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    let plane = h * w;
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(quantize_unit(d[c * plane + i].to_f64()));
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Export each sample of a `[n,C,H,W]` batch as `prefix_<id>.pgm` (1
/// channel) or `.ppm` (3 channels) under `dir`.
pub fn export_batch_images<T: Scalar>(
    dir: &Path,
    prefix: &str,
    batch: &Tensor<T>,
    ids: &[u64],
) -> Result<Vec<std::path::PathBuf>> {
    let (n, c, h, w) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    if ids.len() != n {
        return Err(Error::rejected("export_batch_images", "ids/batch mismatch"));
    }
    std::fs::create_dir_all(dir)?;
    let per = c * h * w;
    let mut paths = Vec::with_capacity(n);
    for (i, &id) in ids.iter().enumerate() {
        let slice = batch.data()[i * per..(i + 1) * per].to_vec();
        let path = if c == 1 {
            let p = dir.join(format!("{prefix}_{id}.pgm"));
            write_pgm(&p, &Tensor::new(vec![h, w], slice)?)?;
            p
        } else if c == 3 {
            let p = dir.join(format!("{prefix}_{id}.ppm"));
            write_ppm(&p, &Tensor::new(vec![c, h, w], slice)?)?;
            p
        } else {
            return Err(Error::rejected(
                "export_batch_images",
                format!("unsupported channel count {c}"),
            ));
        };
        paths.push(path);
    }
    Ok(paths)
}

/// A persisted adversarial batch: perturbed images plus the ids, targets
/// and the resolved attack configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch {
    pub x_adv: Tensor<f32>,
    pub ids: Vec<u64>,
    pub targets: Vec<usize>,
    pub config_echo: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct AdvEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct AdvManifest {
    kind: String,
    ids: Vec<u64>,
    targets: Vec<usize>,
    config: serde_json::Value,
    entries: Vec<AdvEntry>,
}

pub fn write_adv_batch(path: &Path, batch: &AdvBatch) -> Result<()> {
    if batch.ids.len() != batch.x_adv.shape()[0] || batch.targets.len() != batch.ids.len() {
        return Err(Error::rejected("write_adv_batch", "ids/targets mismatch"));
    }
    let mut blob = Vec::with_capacity(batch.x_adv.len() * 4);
    for &v in batch.x_adv.data() {
        v.write_le(&mut blob);
    }
    let manifest = AdvManifest {
        kind: "adversarial_batch".to_string(),
        ids: batch.ids.clone(),
        targets: batch.targets.clone(),
        config: batch.config_echo.clone(),
        entries: vec![AdvEntry {
            name: "x_adv".to_string(),
            shape: batch.x_adv.shape().to_vec(),
            dtype: Dtype::F32,
            byte_offset: 0,
            byte_len: blob.len() as u64,
        }],
    };
    write_container(path, &serde_json::to_vec(&manifest)?, &blob)
}

pub fn read_adv_batch(path: &Path) -> Result<AdvBatch> {
    let (manifest_bytes, blob) = read_container(path)?;
    let manifest: AdvManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::parse(ParseKind::Manifest, format!("manifest json: {e}")))?;
    if manifest.kind != "adversarial_batch" {
        return Err(Error::parse(
            ParseKind::Manifest,
            format!("container holds {:?}, expected an adversarial batch", manifest.kind),
        ));
    }
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.name == "x_adv")
        .ok_or_else(|| Error::parse(ParseKind::Manifest, "missing x_adv entry"))?;
    let count: usize = entry.shape.iter().product();
    if entry.byte_len != (count * entry.dtype.size_bytes()) as u64 {
        return Err(Error::parse(
            ParseKind::LengthMismatch,
            "x_adv byte length disagrees with shape",
        ));
    }
    let start = entry.byte_offset as usize;
    let end = start + entry.byte_len as usize;
    if end > blob.len() {
        return Err(Error::parse(ParseKind::Truncated, "x_adv blob truncated"));
    }
    let data: Vec<f32> = blob[start..end].chunks_exact(4).map(f32::read_le).collect();
    Ok(AdvBatch {
        x_adv: Tensor::new(entry.shape.clone(), data)?,
        ids: manifest.ids,
        targets: manifest.targets,
        config_echo: manifest.config,
    })
}
