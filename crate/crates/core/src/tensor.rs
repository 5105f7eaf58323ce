//! Dense rank-4 tensors in `(C, H, W, D)` row-major layout.
//!
//! Batch size is always one, so there is no batch axis. Vectors are stored as
//! `(n, 1, 1, 1)` and matrices as `(rows, cols, 1, 1)`; per-axis projections
//! keep their axis in place (`(C, H, 1, 1)`, `(C, 1, W, 1)`, `(C, 1, 1, D)`)
//! so they broadcast without reshaping.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize, d: usize) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 || d == 0 {
            return Err(Error::shape(format!(
                "all extents must be >= 1, got ({c}, {h}, {w}, {d})"
            )));
        }
        Ok(Shape { c, h, w, d })
    }

    pub fn vector(n: usize) -> Result<Self> {
        Shape::new(n, 1, 1, 1)
    }

    pub fn matrix(rows: usize, cols: usize) -> Result<Self> {
        Shape::new(rows, cols, 1, 1)
    }

    /// Shape of a cubic convolution kernel: `(C_out, C_in, k³, 1)`.
    pub fn kernel(c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::UnsupportedKernel(k));
        }
        Shape::new(c_out, c_in, k * k * k, 1)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c, self.h, self.w, self.d]
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w * self.d
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn same_spatial(&self, other: &Shape) -> bool {
        self.h == other.h && self.w == other.w && self.d == other.d
    }

    pub fn with_channels(&self, c: usize) -> Shape {
        Shape { c, ..*self }
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize, k: usize) -> usize {
        ((c * self.h + i) * self.w + j) * self.d + k
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.c, self.h, self.w, self.d)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

pub enum Init<'a> {
    Zeros,
    Constant(f64),
    Uniform { rng: &'a mut Rng, lo: f64, hi: f64 },
    FromData(Vec<f64>),
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, init: Init<'_>) -> Result<Self> {
        let n = shape.numel();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(v) => vec![v; n],
            Init::Uniform { rng, lo, hi } => (0..n).map(|_| rng.uniform(lo, hi)).collect(),
            Init::FromData(values) => {
                if values.len() != n {
                    return Err(Error::Size {
                        expected: n,
                        got: values.len(),
                    });
                }
                values
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_data(shape: Shape, data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, Init::FromData(data))
    }

    pub fn uniform(shape: Shape, rng: &mut Rng, lo: f64, hi: f64) -> Self {
        let data = (0..shape.numel()).map(|_| rng.uniform(lo, hi)).collect();
        Tensor { shape, data }
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Tensor::from_data(Shape::vector(values.len())?, values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::from_data(Shape::matrix(rows, cols)?, values)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape {
                c: 1,
                h: 1,
                w: 1,
                d: 1,
            },
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, c: usize, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.shape.index(c, i, j, k)]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, k: usize, value: f64) {
        let idx = self.shape.index(c, i, j, k);
        self.data[idx] = value;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let s = self.shape.spatial();
        &self.data[c * s..(c + 1) * s]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Splits off the first `at` channels; inverse of channel concatenation.
    pub fn split_channels(&self, at: usize) -> Result<(Tensor, Tensor)> {
        if at == 0 || at >= self.shape.c {
            return Err(Error::shape(format!(
                "split point {at} must lie strictly inside 0..{}",
                self.shape.c
            )));
        }
        let cut = at * self.shape.spatial();
        let a = Tensor {
            shape: self.shape.with_channels(at),
            data: self.data[..cut].to_vec(),
        };
        let b = Tensor {
            shape: self.shape.with_channels(self.shape.c - at),
            data: self.data[cut..].to_vec(),
        };
        Ok((a, b))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head: Vec<_> = self.data.iter().take(SHOWN).collect();
        if self.data.len() > SHOWN {
            write!(f, "{head:?}…")
        } else {
            write!(f, "{head:?}")
        }
    }
}

/// Seeded, platform-independent random source.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from `seed`; used to partition one seed
    /// into non-overlapping sub-experiments.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_constant_and_data() {
        let t = Tensor::new(Shape::new(1, 2, 2, 2).unwrap(), Init::Zeros).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));

        let t = Tensor::new(Shape::new(2, 1, 1, 1).unwrap(), Init::Constant(3.5)).unwrap();
        assert_eq!(t.data(), &[3.5, 3.5]);

        let t = Tensor::new(
            Shape::new(1, 1, 1, 2).unwrap(),
            Init::FromData(vec![1.0, 2.0]),
        )
        .unwrap();
        assert_eq!(t.data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_extent_and_length_mismatch_are_rejected() {
        assert!(matches!(Shape::new(1, 0, 2, 2), Err(Error::Shape(_))));
        let err = Tensor::from_data(Shape::new(1, 1, 1, 3).unwrap(), vec![1.0]).unwrap_err();
        assert!(matches!(err, Error::Size { expected: 3, got: 1 }));
    }

    #[test]
    fn even_kernel_is_unsupported() {
        assert!(matches!(Shape::kernel(1, 1, 2), Err(Error::UnsupportedKernel(2))));
        assert_eq!(Shape::kernel(4, 2, 3).unwrap().dims(), [4, 2, 27, 1]);
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<f64> = (0..16).map(|_| a.uniform(-1.0, 1.0)).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.uniform(-1.0, 1.0)).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().all(|v| (-1.0..1.0).contains(v)));

        let mut s0 = Rng::stream(42, 0);
        let mut s1 = Rng::stream(42, 1);
        assert_ne!(s0.next_u64(), s1.next_u64());
    }

    #[test]
    fn split_recovers_channels() {
        let t = Tensor::from_data(Shape::new(3, 1, 1, 2).unwrap(), (0..6).map(f64::from).collect())
            .unwrap();
        let (a, b) = t.split_channels(1).unwrap();
        assert_eq!(a.data(), &[0.0, 1.0]);
        assert_eq!(b.data(), &[2.0, 3.0, 4.0, 5.0]);
        assert!(t.split_channels(0).is_err());
    }
}
