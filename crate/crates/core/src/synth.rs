//! Deterministic synthetic digit corpus.
//!
//! The transfer experiments need a small labelled image set that is
//! learnable by the zoo yet varied enough that models disagree off their
//! training data. This renderer produces MNIST-shaped digit images (glyphs
//! with random scale, placement, shear, stroke intensity and pixel noise),
//! serialized through the IDX container so the ingestion path stays
//! identical to real exports.

use crate::data::{write_idx_images, write_idx_labels, Dataset};
use crate::error::Result;
use crate::rng::{purpose, tag, Stream};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// 5x7 digit glyphs, one row per line, LSB on the right.
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
pub const SIDE: usize = 28;

/// Rendering parameters. `noise` is the peak amplitude of the uniform
/// background noise; raising it makes the task harder and the trained
/// models more idiosyncratic.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub seed: u64,
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(n: usize, seed: u64, noise: f64) -> Self {
        SynthSpec { n, seed, noise }
    }
}

fn render_digit(label: usize, rng: &mut impl Rng, noise: f64) -> [f64; SIDE * SIDE] {
    let mut img = [0.0f64; SIDE * SIDE];
    let scale = rng.random_range(2..=3usize);
    let (gw, gh) = (GLYPH_W * scale, GLYPH_H * scale);
    let shear = rng.random_range(-0.35..0.35f64);
    // keep the sheared glyph inside the canvas
    let max_shift = (shear.abs() * gh as f64 / 2.0).ceil() as usize + 1;
    let left = rng.random_range(max_shift..SIDE - gw - max_shift);
    let top = rng.random_range(1..SIDE - gh - 1);
    let ink = rng.random_range(0.65..1.0f64);
    let glyph = &GLYPHS[label];
    for gy in 0..gh {
        let row = glyph[gy / scale];
        let dy = gy as f64 - gh as f64 / 2.0;
        let shift = (shear * dy).round() as i64;
        for gx in 0..gw {
            if (row >> (GLYPH_W - 1 - gx / scale)) & 1 == 1 {
                let x = left as i64 + gx as i64 + shift;
                let y = top + gy;
                if x >= 0 && (x as usize) < SIDE {
                    let jitter = rng.random_range(-0.12..0.12f64);
                    img[y * SIDE + x as usize] = (ink + jitter).clamp(0.0, 1.0);
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v + rng.random_range(0.0..noise)).clamp(0.0, 1.0);
    }
    img
}

/// Render the corpus into IDX containers: `(images_idx, labels_idx)`.
/// Labels cycle through 0..10 so classes stay balanced; all randomness is
/// keyed per sample id.
pub fn synth_idx_bytes(spec: &SynthSpec) -> Result<(Vec<u8>, Vec<u8>)> {
    let stream = Stream::root(spec.seed).derive(tag::PURPOSE, purpose::SYNTH_RENDER);
    let mut images = Tensor::<f64>::zeros(&[spec.n, SIDE, SIDE]);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let label = i % 10;
        labels.push(label as u8);
        let mut rng = stream.derive(tag::SAMPLE, i as u64).rng();
        let img = render_digit(label, &mut rng, spec.noise);
        images.data_mut()[i * SIDE * SIDE..(i + 1) * SIDE * SIDE].copy_from_slice(&img);
    }
    Ok((write_idx_images(&images)?, write_idx_labels(&labels)))
}

/// Render and immediately parse back through the IDX path.
pub fn synth_dataset<T: Scalar>(spec: &SynthSpec) -> Result<Dataset<T>> {
    let (images, labels) = synth_idx_bytes(spec)?;
    Dataset::from_idx(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_balanced() {
        let spec = SynthSpec::new(50, 3, 0.1);
        let a: Dataset<f32> = synth_dataset(&spec).unwrap();
        let b: Dataset<f32> = synth_dataset(&spec).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.images.shape(), &[50, 1, 28, 28]);
        let mut counts = [0usize; 10];
        for &l in &a.labels {
            counts[l as usize] += 1;
        }
        assert_eq!(counts, [5; 10]);
    }

    #[test]
    fn pixels_in_unit_range_and_digits_visible() {
        let ds: Dataset<f64> = synth_dataset(&SynthSpec::new(20, 7, 0.15)).unwrap();
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // every image should contain some ink well above the noise floor
        let per = 28 * 28;
        for i in 0..20 {
            let max = ds.images.data()[i * per..(i + 1) * per]
                .iter()
                .cloned()
                .fold(0.0f64, f64::max);
            assert!(max > 0.5, "sample {i} has no visible ink");
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a: Dataset<f32> = synth_dataset(&SynthSpec::new(10, 1, 0.1)).unwrap();
        let b: Dataset<f32> = synth_dataset(&SynthSpec::new(10, 2, 0.1)).unwrap();
        assert_ne!(a.images.data(), b.images.data());
    }
}
