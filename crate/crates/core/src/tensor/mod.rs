//! Dense N×C×H×W tensors and a reverse-mode differentiation tape.

mod kernels;
mod optim;
mod params;
mod ssim;
mod tape;

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use kernels::{direct_conv_shape, gaussian_window, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
pub use optim::{adam_step, Adam, OptimizerState};
pub use params::{Binding, Param, ParameterSet};
pub use ssim::ssim_window_mask;
pub use tape::{Gradients, PadMode, Tape, Var};

/// Four-dimensional batch shape, row-major `n, c, h, w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { n: 1, c: 1, h: 1, w: 1 };

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements per sample (`c·h·w`).
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(d: &[usize]) -> Result<Self> {
        match *d {
            [n, c, h, w] => Ok(Shape { n, c, h, w }),
            _ => Err(Error::shape("shape", format!("expected rank 4, got rank {}", d.len()))),
        }
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Owned row-major tensor value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!("{} elements do not fill shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape::SCALAR, data: vec![value] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// The single element of a 1×1×1×1 tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::c(v.f64())).collect() }
    }

    /// Copy of sample `i` as a batch of one.
    pub fn sample(&self, i: usize) -> Tensor<T> {
        let len = self.shape.sample_len();
        Tensor {
            shape: Shape { n: 1, ..self.shape },
            data: self.data[i * len..(i + 1) * len].to_vec(),
        }
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let per = Shape { n: 1, ..first.shape };
        let mut data = Vec::with_capacity(items.len() * per.numel());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (per.c, per.h, per.w) {
                return Err(Error::shape("stack", format!("{} vs {}", t.shape, first.shape)));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: Shape { n, ..per }, data })
    }

    /// Channels `start..start+count` of every sample.
    pub fn channels(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.shape.c {
            return Err(Error::shape("channels", format!("{}..{} of {}", start, start + count, self.shape.c)));
        }
        let plane = self.shape.plane();
        let mut data = Vec::with_capacity(self.shape.n * count * plane);
        for n in 0..self.shape.n {
            let base = self.shape.index(n, start, 0, 0);
            data.extend_from_slice(&self.data[base..base + count * plane]);
        }
        Ok(Tensor { shape: Shape { c: count, ..self.shape }, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::c(self.data.len().max(1) as f64)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}
