//! Dense row-major tensors and the translation-invariant smoothing kernels.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Element type marker stored in serialized containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64` only; f32 is
/// the experiment dtype, f64 the gradient-verification dtype.
pub trait Scalar:
    Copy
    + Clone
    + Default
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_scalar(self) -> bool;
    fn abs_scalar(self) -> Self;
    fn max_scalar(self, other: Self) -> Self;
    fn min_scalar(self, other: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
    fn abs_scalar(self) -> Self {
        self.abs()
    }
    fn max_scalar(self, other: Self) -> Self {
        self.max(other)
    }
    fn min_scalar(self, other: Self) -> Self {
        self.min(other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
    fn abs_scalar(self) -> Self {
        self.abs()
    }
    fn max_scalar(self, other: Self) -> Self {
        self.max(other)
    }
    fn min_scalar(self, other: Self) -> Self {
        self.min(other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Dense row-major n-dimensional array. Carrier for images, weights and
/// gradients; immutable by convention once handed across module boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor construction", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; len],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn scalar_like(&self, value: f64) -> T {
        let _ = self;
        T::from_f64(value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self += factor * other`, elementwise in place.
    pub fn axpy(&mut self, factor: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.to_f64() * b.to_f64())
            .sum())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite_scalar()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.abs_scalar().to_f64())
            .fold(0.0, f64::max)
    }

    /// Offset of `[b, c, y, x]` in a rank-4 tensor.
    #[inline]
    pub fn offset4(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let (cs, hs, ws) = (self.shape[1], self.shape[2], self.shape[3]);
        ((b * cs + c) * hs + y) * ws + x
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}

/// sign with sign(0) = 0.
#[inline]
pub fn sign<T: Scalar>(v: T) -> T {
    if v > T::ZERO {
        T::ONE
    } else if v < T::ZERO {
        -T::ONE
    } else {
        T::ZERO
    }
}

/// 1-D profile family for the gradient-smoothing kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Uniform,
    Linear,
    Delta,
}

/// Specification of the separable 2-D smoothing kernel used for gradient
/// fusion. `sigma` only applies to the gaussian family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub length: usize,
    pub sigma: f64,
}

impl KernelSpec {
    pub fn gaussian(length: usize, sigma: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Gaussian,
            length,
            sigma,
        }
    }

    pub fn uniform(length: usize) -> Self {
        KernelSpec {
            family: KernelFamily::Uniform,
            length,
            sigma: 1.0,
        }
    }

    pub fn linear(length: usize) -> Self {
        KernelSpec {
            family: KernelFamily::Linear,
            length,
            sigma: 1.0,
        }
    }

    pub fn delta() -> Self {
        KernelSpec {
            family: KernelFamily::Delta,
            length: 1,
            sigma: 1.0,
        }
    }

    /// A delta kernel convolves as the identity, so callers may skip it.
    pub fn is_delta(&self) -> bool {
        matches!(self.family, KernelFamily::Delta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.length % 2 == 0 {
            return Err(Error::rejected(
                "kernel spec",
                format!("length must be odd and positive, got {}", self.length),
            ));
        }
        if matches!(self.family, KernelFamily::Gaussian) && !(self.sigma > 0.0) {
            return Err(Error::rejected(
                "kernel spec",
                format!("gaussian sigma must be positive, got {}", self.sigma),
            ));
        }
        Ok(())
    }
}

/// Materialize the separable 2-D kernel: outer product of the 1-D profile,
/// normalized so all entries sum to 1.
pub fn make_kernel<T: Scalar>(spec: &KernelSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let n = spec.length;
    let radius = (n / 2) as i64;
    let profile: Vec<f64> = (0..n)
        .map(|i| {
            let d = (i as i64 - radius) as f64;
            match spec.family {
                KernelFamily::Gaussian => (-d * d / (2.0 * spec.sigma * spec.sigma)).exp(),
                KernelFamily::Uniform => 1.0,
                KernelFamily::Linear => 1.0 - d.abs() / (radius as f64 + 1.0),
                KernelFamily::Delta => {
                    if d == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        })
        .collect();
    let mut grid = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            grid[y * n + x] = profile[y] * profile[x];
        }
    }
    let total: f64 = grid.iter().sum();
    let data = grid.iter().map(|&v| T::from_f64(v / total)).collect();
    Tensor::new(vec![n, n], data)
}

/// Bilinear interpolation weights mapping an `in_size` axis onto `out_size`
/// (half-pixel centers, edge clamped). Each output index maps to two source
/// indices with complementary weights.
pub fn bilinear_weights(in_size: usize, out_size: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let pos = (o as f64 + 0.5) * scale - 0.5;
            let clamped = pos.clamp(0.0, (in_size - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(in_size - 1);
            let frac = clamped - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Separable bilinear resize of one `[C,H,W]` slice to `[C,OH,OW]`. Equal
/// sizes copy the input bit for bit.
pub fn bilinear_resize<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if oh == h && ow == w {
        return src.to_vec();
    }
    let wy = bilinear_weights(h, oh);
    let wx = bilinear_weights(w, ow);
    let mut out = vec![T::ZERO; c * oh * ow];
    for ci in 0..c {
        let base = ci * h * w;
        for (oy, &(y0, y1, fy0, fy1)) in wy.iter().enumerate() {
            for (ox, &(x0, x1, fx0, fx1)) in wx.iter().enumerate() {
                let v = src[base + y0 * w + x0].to_f64() * (fy0 * fx0)
                    + src[base + y0 * w + x1].to_f64() * (fy0 * fx1)
                    + src[base + y1 * w + x0].to_f64() * (fy1 * fx0)
                    + src[base + y1 * w + x1].to_f64() * (fy1 * fx1);
                out[ci * oh * ow + oy * ow + ox] = T::from_f64(v);
            }
        }
    }
    out
}

/// Exact adjoint of [`bilinear_resize`]: scatter an upstream `[C,OH,OW]`
/// gradient back through the same interpolation weights.
pub fn bilinear_resize_adjoint<T: Scalar>(
    up: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if oh == h && ow == w {
        return up.to_vec();
    }
    let wy = bilinear_weights(h, oh);
    let wx = bilinear_weights(w, ow);
    let mut out = vec![T::ZERO; c * h * w];
    for ci in 0..c {
        let base = ci * h * w;
        for (oy, &(y0, y1, fy0, fy1)) in wy.iter().enumerate() {
            for (ox, &(x0, x1, fx0, fx1)) in wx.iter().enumerate() {
                let u = up[ci * oh * ow + oy * ow + ox].to_f64();
                out[base + y0 * w + x0] += T::from_f64(u * fy0 * fx0);
                out[base + y0 * w + x1] += T::from_f64(u * fy0 * fx1);
                out[base + y1 * w + x0] += T::from_f64(u * fy1 * fx0);
                out[base + y1 * w + x1] += T::from_f64(u * fy1 * fx1);
            }
        }
    }
    out
}

/// Boundary handling for [`depthwise_convolve_padded`]. Circular mode exists
/// only so tests can check sum preservation; the attack always uses zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Circular,
}

/// Convolve each channel of a `[batch, C, H, W]` tensor with a 2-D kernel,
/// "same" output size, zero padding.
pub fn depthwise_convolve<T: Scalar>(grad: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    depthwise_convolve_padded(grad, kernel, Padding::Zero)
}

pub fn depthwise_convolve_padded<T: Scalar>(
    grad: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    if grad.shape().len() != 4 {
        return Err(Error::shape("depthwise_convolve input", &[0, 0, 0, 0], grad.shape()));
    }
    if kernel.shape().len() != 2 || kernel.shape()[0] != kernel.shape()[1] {
        return Err(Error::shape("depthwise_convolve kernel", &[0, 0], kernel.shape()));
    }
    let (b, c, h, w) = (
        grad.shape()[0],
        grad.shape()[1],
        grad.shape()[2],
        grad.shape()[3],
    );
    let l = kernel.shape()[0];
    let r = (l / 2) as i64;
    let mut out = Tensor::zeros(grad.shape());
    let kd = kernel.data();
    let gd = grad.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut acc = T::ZERO;
                    for ky in -r..=r {
                        for kx in -r..=r {
                            let kval = kd[((ky + r) * l as i64 + (kx + r)) as usize];
                            let (sy, sx) = (y + ky, x + kx);
                            match padding {
                                Padding::Zero => {
                                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                                        acc += kval * gd[base + (sy as usize) * w + sx as usize];
                                    }
                                }
                                Padding::Circular => {
                                    let cy = sy.rem_euclid(h as i64) as usize;
                                    let cx = sx.rem_euclid(w as i64) as usize;
                                    acc += kval * gd[base + cy * w + cx];
                                }
                            }
                        }
                    }
                    od[base + (y as usize) * w + x as usize] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_conv(input: &[f64], h: usize, w: usize, kernel: &[f64], l: usize) -> Vec<f64> {
        let r = (l / 2) as i64;
        let mut out = vec![0.0; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for ky in -r..=r {
                    for kx in -r..=r {
                        let (sy, sx) = (y + ky, x + kx);
                        if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                            acc += kernel[((ky + r) * l as i64 + kx + r) as usize]
                                * input[(sy * w as i64 + sx) as usize];
                        }
                    }
                }
                out[(y * w as i64 + x) as usize] = acc;
            }
        }
        out
    }

    #[test]
    fn delta_kernel_is_identity_matrix() {
        let k: Tensor<f64> = make_kernel(&KernelSpec::delta()).unwrap();
        assert_eq!(k.shape(), &[1, 1]);
        assert_eq!(k.data(), &[1.0]);
    }

    #[test]
    fn uniform_three_is_one_ninth() {
        let k: Tensor<f64> = make_kernel(&KernelSpec::uniform(3)).unwrap();
        for &v in k.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gaussian_five_symmetric_center_maximal_sum_one() {
        let k: Tensor<f64> = make_kernel(&KernelSpec::gaussian(5, 3.0)).unwrap();
        let d = k.data();
        let n = 5;
        // direct evaluation oracle
        let mut oracle = vec![0.0f64; 25];
        for y in 0..5i64 {
            for x in 0..5i64 {
                let dy = (y - 2) as f64;
                let dx = (x - 2) as f64;
                oracle[(y * 5 + x) as usize] =
                    (-(dy * dy) / 18.0).exp() * (-(dx * dx) / 18.0).exp();
            }
        }
        let total: f64 = oracle.iter().sum();
        for (a, b) in d.iter().zip(oracle.iter()) {
            assert!((a - b / total).abs() < 1e-12);
        }
        let sum: f64 = d.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for y in 0..n {
            for x in 0..n {
                assert_eq!(d[y * n + x], d[x * n + y]);
                assert_eq!(d[y * n + x], d[(n - 1 - y) * n + (n - 1 - x)]);
                assert!(d[y * n + x] <= d[2 * n + 2]);
            }
        }
    }

    #[test]
    fn even_kernel_length_rejected() {
        assert!(make_kernel::<f64>(&KernelSpec::uniform(4)).is_err());
        assert!(KernelSpec::gaussian(5, 0.0).validate().is_err());
    }

    #[test]
    fn every_family_sums_to_one() {
        for spec in [
            KernelSpec::gaussian(7, 1.5),
            KernelSpec::uniform(5),
            KernelSpec::linear(5),
            KernelSpec::delta(),
        ] {
            let k: Tensor<f64> = make_kernel(&spec).unwrap();
            let sum: f64 = k.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "{spec:?} sums to {sum}");
            assert!(k.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn delta_convolution_is_identity() {
        let g = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| (i as f64) * 0.37 - 1.0);
        let k = make_kernel(&KernelSpec::delta()).unwrap();
        let out = depthwise_convolve(&g, &k).unwrap();
        assert_eq!(out.data(), g.data());
    }

    #[test]
    fn constant_input_interior_unchanged() {
        let g = Tensor::<f64>::full(&[1, 1, 6, 6], 0.5);
        let k = make_kernel(&KernelSpec::gaussian(3, 1.0)).unwrap();
        let out = depthwise_convolve(&g, &k).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                assert!((out.data()[y * 6 + x] - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ramp_matches_brute_force_oracle() {
        let g = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let k: Tensor<f64> = make_kernel(&KernelSpec::uniform(3)).unwrap();
        let out = depthwise_convolve(&g, &k).unwrap();
        let oracle = brute_force_conv(g.data(), 4, 4, k.data(), 3);
        for (a, b) in out.data().iter().zip(oracle.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn convolution_is_linear() {
        let g1 = Tensor::<f64>::from_fn(&[1, 2, 5, 5], |i| (i as f64 * 1.7).sin());
        let g2 = Tensor::<f64>::from_fn(&[1, 2, 5, 5], |i| (i as f64 * 0.3).cos());
        let k = make_kernel(&KernelSpec::gaussian(5, 2.0)).unwrap();
        let (a, b) = (1.25, -0.75);
        let combined = g1.scale(a).add(&g2.scale(b)).unwrap();
        let lhs = depthwise_convolve(&combined, &k).unwrap();
        let rhs = depthwise_convolve(&g1, &k)
            .unwrap()
            .scale(a)
            .add(&depthwise_convolve(&g2, &k).unwrap().scale(b))
            .unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data().iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn circular_padding_preserves_channel_sum() {
        let g = Tensor::<f64>::from_fn(&[1, 1, 6, 6], |i| (i as f64 * 0.913).sin());
        let k = make_kernel(&KernelSpec::gaussian(5, 1.0)).unwrap();
        let out = depthwise_convolve_padded(&g, &k, Padding::Circular).unwrap();
        let s_in: f64 = g.data().iter().sum();
        let s_out: f64 = out.data().iter().sum();
        assert!((s_in - s_out).abs() < 1e-5);
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0f32), 0.0);
        assert_eq!(sign(-0.0f32), 0.0);
        assert_eq!(sign(3.2f32), 1.0);
        assert_eq!(sign(-0.1f64), -1.0);
    }

    #[test]
    fn tensor_length_validated() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 6]).is_ok());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }
}
