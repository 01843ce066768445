//! Dense-array reverse-mode automatic differentiation core.
//!
//! A [`Tape`](tape::Tape) records eager operations over [`Array`] values and
//! replays them in reverse to accumulate gradients. The op set is exactly what
//! the planning head needs: matmul, elementwise arithmetic, layer norm, masked
//! softmax, GELU, concat/slice/reshape, and gather/linear-combination rows for
//! patchifying and bilinear feature sampling.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tape;

/// Scalar type of the tensor core. 64-bit by default; the `f32` feature
/// switches to 32-bit (gradient-check suites require 64-bit).
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

use crate::rng::Rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// A dense row-major array of `Real` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "contract error: array data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Array { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: Real) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: Real) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<Real>]) -> Self {
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            assert_eq!(r.len(), ncols, "ragged rows");
            data.extend_from_slice(r);
        }
        Array {
            shape: vec![rows.len(), ncols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    /// Number of rows of a 2D array.
    pub fn rows(&self) -> usize {
        assert_eq!(self.ndim(), 2, "expected 2D array, got shape {:?}", self.shape);
        self.shape[0]
    }

    /// Number of columns of a 2D array.
    pub fn cols(&self) -> usize {
        assert_eq!(self.ndim(), 2, "expected 2D array, got shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> Real {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: Real) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn row(&self, r: usize) -> &[Real] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn scalar_value(&self) -> Real {
        assert_eq!(self.len(), 1, "expected scalar, got shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Array {
        Array::new(shape.to_vec(), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Standard normal samples (Box-Muller).
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Array {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push((r * theta.cos()) as Real);
            if data.len() < n {
                data.push((r * theta.sin()) as Real);
            }
        }
        Array {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Truncated normal init (resample outside two standard deviations).
    pub fn trunc_normal(shape: &[usize], sigma: Real, rng: &mut Rng) -> Array {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let z = r * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                data.push(z as Real * sigma);
            }
        }
        Array {
            shape: shape.to_vec(),
            data,
        }
    }
}
