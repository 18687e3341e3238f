//! Dense row-major tensors and a deterministic counter-based RNG.
//!
//! Everything in this crate moves through [`Tensor`]: activations, weights,
//! decay masks, recurrent states. Storage is always `f64`; a [`Precision`]
//! tag controls *element precision*: under [`Precision::Fp32`] every stored
//! value is rounded to the nearest `f32` after each operation, so the data
//! is exactly f32-representable while intermediate arithmetic keeps f64
//! accumulators. Under [`Precision::Fp64`] values are untouched.
//!
//! Tensors are immutable values once built by an op; ops return fresh
//! tensors. That makes them trivially safe to share across threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element precision of a tensor (and of every op result derived from it).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    Fp32,
    Fp64,
}

impl Precision {
    /// Normalization guard value: 1e-6 under fp32, 1e-12 under fp64.
    pub fn eps(self) -> f64 {
        match self {
            Precision::Fp32 => 1e-6,
            Precision::Fp64 => 1e-12,
        }
    }

    /// Round a value to this element precision.
    #[inline]
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Precision::Fp32 => x as f32 as f64,
            Precision::Fp64 => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Fp64 => "fp64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(Precision::Fp32),
            "fp64" => Ok(Precision::Fp64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

/// Dense N-dimensional real array. Row-major, flat storage.
///
/// Invariant: `product(shape) == data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    /// Build a tensor from flat data; the data is quantized to `precision`.
    pub fn new(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if precision == Precision::Fp32 {
            for x in &mut data {
                *x = *x as f32 as f64;
            }
        }
        Ok(Tensor { shape, data, precision })
    }

    pub fn zeros(shape: Vec<usize>, precision: Precision) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], precision }
    }

    pub fn scalar(x: f64, precision: Precision) -> Self {
        Tensor { shape: vec![1], data: vec![precision.quantize(x)], precision }
    }

    pub fn from_rows(rows: &[&[f64]], precision: Precision) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::invalid("tensor", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data, precision)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Number of rows when viewed as a matrix ([n] counts as n rows of 1).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Scalar payload of a 1-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Round stored values to the tensor's element precision.
    pub fn quantize_in_place(&mut self) {
        if self.precision == Precision::Fp32 {
            for x in &mut self.data {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let mut out = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            precision: self.precision,
        };
        out.quantize_in_place();
        out
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::new(self.shape.clone(), data, self.precision)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Deterministic RNG: a 64-bit seed plus an internal counter.
///
/// splitmix64 over an incrementing counter; the same seed always yields the
/// same bit-exact draw sequence on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Independent stream derived from this seed (for sub-tasks).
    pub fn fork(&mut self, tag: u64) -> Rng {
        Rng { seed: self.next_u64() ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15), counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        let mut z = self
            .seed
            .wrapping_add(self.counter.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw (Box-Muller; one draw per pair, second discarded
    /// so the stream position stays a pure function of the draw count).
    pub fn normal(&mut self) -> f64 {
        let u1 = (1.0 - self.uniform()).max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal truncated to two standard deviations (resampled).
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn normal_tensor(&mut self, shape: Vec<usize>, std: f64, precision: Precision) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.normal() * std).collect();
        Tensor::new(shape, data, precision).expect("consistent shape")
    }

    pub fn trunc_normal_tensor(
        &mut self,
        shape: Vec<usize>,
        std: f64,
        precision: Precision,
    ) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.trunc_normal(std)).collect();
        Tensor::new(shape, data, precision).expect("consistent shape")
    }
}
