//! Minimal dense-tensor training core: kernels with hand-written adjoints,
//! parameter slots with optimizer state and Polyak shadows, and an executor
//! that runs a [`GraphIR`](crate::graph::GraphIR) forwards and backwards.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

pub mod kernels;
pub mod loss;
pub mod network;
pub mod params;
pub mod units;

pub use loss::{LossBreakdown, LossSpec};
pub use network::{Mode, Network};
pub use params::{AdamConfig, ParamStore, SlotId};

/// Floating-point element type. Tests run in `f64`, searches in `f32`.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("class id {class} outside [0, {num_classes})")]
    ClassOutOfRange { class: u8, num_classes: usize },
    #[error("polyak weights already swapped in")]
    AlreadySwapped,
    #[error("polyak weights are not swapped in")]
    NotSwapped,
    #[error("shape mismatch: {0}")]
    Shape(alloc::string::String),
}

/// Dense NCHW tensor. Lower-rank data uses unit dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    shape: [usize; 4],
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: [usize; 4], data: Vec<R>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data length");
        Self { shape, data }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![R::zero(); shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// Contiguous `h*w` plane for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[R] {
        let hw = self.shape[2] * self.shape[3];
        let o = (n * self.shape[1] + c) * hw;
        &self.data[o..o + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [R] {
        let hw = self.shape[2] * self.shape[3];
        let o = (n * self.shape[1] + c) * hw;
        &mut self.data[o..o + hw]
    }

    /// Sample `n` as its own single-item tensor.
    pub fn sample(&self, n: usize) -> Tensor<R> {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor::new(
            [1, self.shape[1], self.shape[2], self.shape[3]],
            self.data[n * per..(n + 1) * per].to_vec(),
        )
    }

    /// Concatenates along the batch dimension.
    pub fn stack(items: &[&Tensor<R>]) -> Tensor<R> {
        assert!(!items.is_empty(), "stack of nothing");
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            assert_eq!(&t.shape[1..], &[c, h, w], "stack shape mismatch");
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::new([n, c, h, w], data)
    }

    pub fn add_assign(&mut self, other: &Tensor<R>) {
        assert_eq!(self.shape, other.shape, "add shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: R) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| S::lit(v.as_f64())).collect(),
        }
    }

    /// Index of the largest channel value per pixel, for each sample.
    pub fn argmax_channels(&self) -> Vec<u8> {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let mut out = vec![0u8; n * hw];
        for s in 0..n {
            for p in 0..hw {
                let mut best = 0;
                let mut best_v = self.data[(s * c) * hw + p];
                for k in 1..c {
                    let v = self.data[(s * c + k) * hw + p];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                out[s * hw + p] = best as u8;
            }
        }
        out
    }
}
