//! Dataset parsing (IDX and CIFAR-10 binary containers) and targeted-attack
//! assignment files.

use crate::error::{Error, ParseKind, Result};
use crate::rng::{purpose, tag, Stream};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const CIFAR_RECORD: usize = 3073;

/// Images in `[0,1]` with integer labels and stable per-sample ids.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<u8>,
    pub ids: Vec<u64>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<u8>, ids: Vec<u64>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::shape("dataset images", &[0, 0, 0, 0], images.shape()));
        }
        let n = images.shape()[0];
        if labels.len() != n || ids.len() != n {
            return Err(Error::rejected(
                "dataset",
                format!(
                    "lengths disagree: {n} images, {} labels, {} ids",
                    labels.len(),
                    ids.len()
                ),
            ));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != n {
            return Err(Error::rejected("dataset", "ids must be unique"));
        }
        Ok(Dataset {
            images,
            labels,
            ids,
        })
    }

    /// Assemble from a parsed IDX image tensor `[n,h,w]` and label tensor `[n]`.
    pub fn from_idx(images_bytes: &[u8], labels_bytes: &[u8]) -> Result<Self> {
        let images = parse_idx::<T>(images_bytes)?;
        let labels_t = parse_idx::<T>(labels_bytes)?;
        if images.shape().len() != 3 {
            return Err(Error::parse(
                ParseKind::LengthMismatch,
                "image idx container must be rank 3",
            ));
        }
        if labels_t.shape().len() != 1 || labels_t.shape()[0] != images.shape()[0] {
            return Err(Error::parse(
                ParseKind::LengthMismatch,
                "label count does not match image count",
            ));
        }
        let (n, h, w) = (images.shape()[0], images.shape()[1], images.shape()[2]);
        let labels: Vec<u8> = labels_t.data().iter().map(|v| v.to_f64() as u8).collect();
        let images = images.reshaped(&[n, 1, h, w])?;
        Dataset::new(images, labels, (0..n as u64).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_spec(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Subset by positional indices, preserving the original ids.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let per: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        let mut ids = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
            ids.push(self.ids[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Dataset::new(Tensor::new(shape, data)?, labels, ids)
    }

    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    if at + 4 > bytes.len() {
        return Err(Error::parse(
            ParseKind::Truncated,
            format!("idx header needs 4 bytes at offset {at}"),
        ));
    }
    Ok(u32::from_be_bytes([
        bytes[at],
        bytes[at + 1],
        bytes[at + 2],
        bytes[at + 3],
    ]))
}

/// Parse an IDX container. Image containers (magic 0x00000803) come back as
/// a rank-3 tensor scaled by 1/255; label containers (magic 0x00000801) as a
/// rank-1 tensor of raw class values.
pub fn parse_idx<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let magic = read_u32_be(bytes, 0)?;
    let (ndim, scale) = match magic {
        IDX_MAGIC_LABELS => (1usize, false),
        IDX_MAGIC_IMAGES => (3usize, true),
        other => {
            return Err(Error::parse(
                ParseKind::BadMagic,
                format!("unexpected idx magic 0x{other:08x}"),
            ))
        }
    };
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(read_u32_be(bytes, 4 + 4 * d)? as usize);
    }
    let header = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header.min(bytes.len())..];
    if payload.len() != expected {
        return Err(Error::parse(
            ParseKind::LengthMismatch,
            format!(
                "idx payload holds {} bytes, dimensions {:?} require {expected}",
                payload.len(),
                dims
            ),
        ));
    }
    let data: Vec<T> = if scale {
        payload
            .iter()
            .map(|&b| T::from_f64(b as f64 / 255.0))
            .collect()
    } else {
        payload.iter().map(|&b| T::from_f64(b as f64)).collect()
    };
    Tensor::new(dims, data)
}

/// Serialize an image stack `[n,h,w]` of `[0,1]` values into IDX bytes with
/// round-to-nearest 8-bit quantization.
pub fn write_idx_images(images: &Tensor<f64>) -> Result<Vec<u8>> {
    if images.shape().len() != 3 {
        return Err(Error::shape("idx images", &[0, 0, 0], images.shape()));
    }
    let mut out = Vec::with_capacity(12 + images.len());
    out.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    for &d in images.shape() {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in images.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Parse CIFAR-10 binary records: 1 label byte + 3072 channel-major pixel
/// bytes per record, scaled by 1/255.
pub fn parse_cifar10<T: Scalar>(bytes: &[u8]) -> Result<Dataset<T>> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::parse(
            ParseKind::LengthMismatch,
            format!(
                "cifar payload of {} bytes is not a positive multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for rec in 0..n {
        let base = rec * CIFAR_RECORD;
        let label = bytes[base];
        if label > 9 {
            return Err(Error::parse(
                ParseKind::BadValue,
                format!("record {rec}: label {label} exceeds 9"),
            ));
        }
        labels.push(label);
        data.extend(
            bytes[base + 1..base + CIFAR_RECORD]
                .iter()
                .map(|&b| T::from_f64(b as f64 / 255.0)),
        );
    }
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        (0..n as u64).collect(),
    )
}

// ---------------------------------------------------------------------------
// Target assignments
// ---------------------------------------------------------------------------

pub const TARGETS_CSV_HEADER: &str = "id,true_label,target_label";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetRow {
    pub id: u64,
    pub true_label: u8,
    pub target_label: u8,
}

/// Per-sample targeted-attack assignments; target never equals the true
/// label and ids are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub rows: Vec<TargetRow>,
}

impl TargetAssignment {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, row) in self.rows.iter().enumerate() {
            if row.target_label == row.true_label {
                return Err(Error::TargetRow {
                    row: i,
                    message: format!("target equals true label {}", row.true_label),
                });
            }
            if !seen.insert(row.id) {
                return Err(Error::TargetRow {
                    row: i,
                    message: format!("duplicate id {}", row.id),
                });
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TARGETS_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                row.id, row.true_label, row.target_label
            ));
        }
        out
    }

    /// Targets aligned with the dataset's sample order.
    pub fn targets_for<T: Scalar>(&self, dataset: &Dataset<T>) -> Result<Vec<usize>> {
        let map: std::collections::BTreeMap<u64, u8> = self
            .rows
            .iter()
            .map(|r| (r.id, r.target_label))
            .collect();
        dataset
            .ids
            .iter()
            .map(|id| {
                map.get(id).map(|&t| t as usize).ok_or_else(|| {
                    Error::rejected("targets", format!("no assignment for id {id}"))
                })
            })
            .collect()
    }
}

/// Draw a target uniformly from the classes other than the true label,
/// deterministically per (seed, id).
pub fn assign_targets<T: Scalar>(
    dataset: &Dataset<T>,
    num_classes: usize,
    seed: u64,
) -> Result<TargetAssignment> {
    if num_classes < 2 {
        return Err(Error::rejected(
            "assign_targets",
            "need at least two classes",
        ));
    }
    let stream = Stream::root(seed).derive(tag::PURPOSE, purpose::TARGET_ASSIGN);
    let rows = dataset
        .ids
        .iter()
        .zip(&dataset.labels)
        .map(|(&id, &label)| {
            let mut rng = stream.derive(tag::SAMPLE, id).rng();
            let k = rng.random_range(0..num_classes - 1) as u8;
            let target = if k >= label { k + 1 } else { k };
            TargetRow {
                id,
                true_label: label,
                target_label: target,
            }
        })
        .collect();
    let out = TargetAssignment { rows };
    out.validate()?;
    Ok(out)
}

/// Parse the `id,true_label,target_label` CSV, enforcing row invariants.
pub fn load_targets(csv_bytes: &[u8]) -> Result<TargetAssignment> {
    let text = std::str::from_utf8(csv_bytes)
        .map_err(|_| Error::parse(ParseKind::CsvHeader, "targets csv is not utf-8"))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == TARGETS_CSV_HEADER => {}
        other => {
            return Err(Error::parse(
                ParseKind::CsvHeader,
                format!("expected header {TARGETS_CSV_HEADER:?}, got {other:?}"),
            ))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                ParseKind::CsvRow,
                format!("row {i}: expected 3 fields, got {}", fields.len()),
            ));
        }
        let parse_u64 = |s: &str, what: &str| {
            s.trim().parse::<u64>().map_err(|_| {
                Error::parse(ParseKind::CsvRow, format!("row {i}: bad {what} {s:?}"))
            })
        };
        rows.push(TargetRow {
            id: parse_u64(fields[0], "id")?,
            true_label: parse_u64(fields[1], "true_label")? as u8,
            target_label: parse_u64(fields[2], "target_label")? as u8,
        });
    }
    let out = TargetAssignment { rows };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_image_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = IDX_MAGIC_IMAGES.to_be_bytes().to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_small_image_container() {
        let bytes = idx_image_bytes(&[1, 2, 2], &[0, 255, 0, 255]);
        let t: Tensor<f64> = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn idx_bad_magic_rejected() {
        let bytes = idx_image_bytes(&[1, 2, 2], &[0, 255, 0, 255]);
        let mut bad = bytes.clone();
        bad[3] = 0x05;
        let err = parse_idx::<f64>(&bad).unwrap_err();
        assert_eq!(err.parse_kind(), Some(ParseKind::BadMagic));
    }

    #[test]
    fn idx_truncated_payload_rejected() {
        let bytes = idx_image_bytes(&[1, 2, 2], &[0, 255, 0]);
        let err = parse_idx::<f64>(&bytes).unwrap_err();
        assert_eq!(err.parse_kind(), Some(ParseKind::LengthMismatch));
    }

    #[test]
    fn idx_scaling_is_exact_at_extremes() {
        let bytes = idx_image_bytes(&[1, 1, 2], &[0, 255]);
        let t: Tensor<f32> = parse_idx(&bytes).unwrap();
        assert_eq!(t.data()[0], 0.0f32);
        assert_eq!(t.data()[1], 1.0f32);
    }

    #[test]
    fn idx_roundtrip_through_writer() {
        let images = Tensor::<f64>::from_fn(&[3, 4, 4], |i| (i % 256) as f64 / 255.0);
        let bytes = write_idx_images(&images).unwrap();
        let back: Tensor<f64> = parse_idx(&bytes).unwrap();
        assert_eq!(back.shape(), images.shape());
        for (a, b) in back.data().iter().zip(images.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cifar_single_record() {
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat(255u8).take(3072));
        let ds: Dataset<f32> = parse_cifar10(&bytes).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![3]);
        assert!(ds.images.data().iter().all(|&v| v == 1.0));
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
    }

    #[test]
    fn cifar_two_records_sequential_ids() {
        let mut bytes = vec![0u8; 3073];
        bytes.extend(vec![1u8; 3073]);
        bytes[3073] = 1;
        let ds: Dataset<f32> = parse_cifar10(&bytes).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.ids, vec![0, 1]);
    }

    #[test]
    fn cifar_bad_length_rejected() {
        let err = parse_cifar10::<f32>(&vec![0u8; 3072]).unwrap_err();
        assert_eq!(err.parse_kind(), Some(ParseKind::LengthMismatch));
    }

    #[test]
    fn cifar_label_out_of_range_rejected() {
        let mut bytes = vec![0u8; 3073];
        bytes[0] = 10;
        let err = parse_cifar10::<f32>(&bytes).unwrap_err();
        assert_eq!(err.parse_kind(), Some(ParseKind::BadValue));
    }

    fn tiny_dataset(n: usize) -> Dataset<f32> {
        Dataset::new(
            Tensor::zeros(&[n, 1, 4, 4]),
            (0..n).map(|i| (i % 10) as u8).collect(),
            (0..n as u64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_classes_force_the_other_target() {
        let ds = Dataset::new(
            Tensor::zeros(&[4, 1, 4, 4]),
            vec![0, 1, 0, 1],
            vec![0, 1, 2, 3],
        )
        .unwrap();
        let t = assign_targets(&ds, 2, 11).unwrap();
        for row in &t.rows {
            assert_eq!(row.target_label, 1 - row.true_label);
        }
    }

    #[test]
    fn assignment_deterministic_per_seed() {
        let ds = tiny_dataset(64);
        let a = assign_targets(&ds, 10, 5).unwrap();
        let b = assign_targets(&ds, 10, 5).unwrap();
        assert_eq!(a, b);
        let c = assign_targets(&ds, 10, 6).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn target_frequencies_near_uniform() {
        let ds = tiny_dataset(10_000);
        let t = assign_targets(&ds, 10, 3).unwrap();
        let mut counts = [0usize; 10];
        for row in &t.rows {
            counts[row.target_label as usize] += 1;
        }
        // each class is a target with probability 1/10 overall (9 donors of
        // 1000 samples each, each picking it with 1/9); 4 sigma binomial band
        let expect = 1000.0;
        let sigma = (10_000.0 * 0.1 * 0.9_f64).sqrt();
        for (c, &k) in counts.iter().enumerate() {
            assert!(
                (k as f64 - expect).abs() < 4.0 * sigma,
                "class {c} count {k} outside 4 sigma of {expect}"
            );
        }
    }

    #[test]
    fn csv_roundtrip_identity() {
        let ds = tiny_dataset(32);
        let t = assign_targets(&ds, 10, 9).unwrap();
        let csv = t.to_csv();
        let back = load_targets(csv.as_bytes()).unwrap();
        assert_eq!(t, back);
        assert_eq!(back.to_csv(), csv);
    }

    #[test]
    fn csv_single_row() {
        let t = load_targets(b"id,true_label,target_label\n0,3,7\n").unwrap();
        assert_eq!(
            t.rows,
            vec![TargetRow {
                id: 0,
                true_label: 3,
                target_label: 7
            }]
        );
    }

    #[test]
    fn csv_target_equals_true_rejected() {
        let err = load_targets(b"id,true_label,target_label\n0,3,3\n").unwrap_err();
        assert!(matches!(err, Error::TargetRow { row: 0, .. }));
    }

    #[test]
    fn csv_duplicate_id_rejected() {
        let err =
            load_targets(b"id,true_label,target_label\n0,3,7\n0,2,5\n").unwrap_err();
        assert!(matches!(err, Error::TargetRow { row: 1, .. }));
    }

    #[test]
    fn csv_missing_header_rejected() {
        let err = load_targets(b"0,3,7\n").unwrap_err();
        assert_eq!(err.parse_kind(), Some(ParseKind::CsvHeader));
    }
}
