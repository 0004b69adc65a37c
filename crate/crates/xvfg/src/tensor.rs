//! Dense NCHW tensors in 64-bit floats.
//!
//! Every value in the library is one of these: images, feature maps, weights,
//! gradients, scalar losses. Data is row-major N → C → H → W and shared
//! behind an `Arc`, so cloning a tensor is cheap and produced tensors are
//! immutable values.

use std::sync::Arc;

use rand::Rng;
use rand_distr_normal::sample_normal;

use crate::error::{Error, Result};

/// NCHW extents. A scalar is `(1,1,1,1)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Flat index of `(n, c, h, w)`.
    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor({})", self.shape)
    }
}

impl Tensor {
    /// Wrap a buffer. Panics if the length does not match; use [`Tensor::from_vec`]
    /// for fallible construction at API boundaries.
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.numel(),
            "buffer length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "from_vec",
                format!("buffer length {} does not match shape {shape}", data.len()),
            ));
        }
        Ok(Tensor::new(shape, data))
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::new(shape, vec![0.0; shape.numel()])
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor::new(shape, vec![value; shape.numel()])
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(Shape::scalar(), vec![value])
    }

    /// Normal(0, std) init, deterministic per RNG state.
    pub fn randn(shape: Shape, mean: f64, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| mean + std * sample_normal(rng))
            .collect();
        Tensor::new(shape, data)
    }

    /// Uniform in [lo, hi).
    pub fn rand_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.shape.is_scalar(), "item() on non-scalar {}", self.shape);
        self.data[0]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    /// Elementwise combine; shapes must already agree.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape, data)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| k * x)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Extract batch element `n` as a [1,C,H,W] tensor.
    pub fn slice_batch(&self, n: usize) -> Tensor {
        let s = self.shape;
        assert!(n < s.n, "batch index {n} out of {}", s.n);
        let stride = s.c * s.h * s.w;
        Tensor::new(
            Shape::new(1, s.c, s.h, s.w),
            self.data[n * stride..(n + 1) * stride].to_vec(),
        )
    }

    /// Stack [1,C,H,W] tensors along the batch dimension.
    pub fn stack_batch(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "stack_batch of nothing");
        let s = parts[0].shape;
        let stride = s.c * s.h * s.w;
        let mut data = Vec::with_capacity(parts.len() * stride);
        for p in parts {
            assert_eq!(p.shape(), s, "stack_batch shape mismatch");
            data.extend_from_slice(p.data());
        }
        Tensor::new(Shape::new(parts.len(), s.c, s.h, s.w), data)
    }

    /// Copy with one element replaced; the finite-difference probe.
    pub fn with_value_at(&self, flat: usize, v: f64) -> Tensor {
        let mut data = self.data.as_ref().clone();
        data[flat] = v;
        Tensor::new(self.shape, data)
    }

    /// Bit-level equality, the determinism yardstick.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// FNV-1a over the little-endian f64 payload; used for golden checksums.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        for x in self.data.iter() {
            for byte in x.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
        hash
    }
}

/// Marsaglia polar method on top of any `Rng`; avoids pulling in a
/// distributions crate for the one sampler we need.
mod rand_distr_normal {
    use rand::Rng;

    pub fn sample_normal(rng: &mut impl Rng) -> f64 {
        loop {
            let u: f64 = rng.gen_range(-1.0..1.0);
            let v: f64 = rng.gen_range(-1.0..1.0);
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }
}
