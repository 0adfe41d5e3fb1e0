//! Dense row-major tensors and the reverse-mode tape that differentiates them.

mod kernels;
mod ops;
mod tape;

pub mod gradcheck;

pub use ops::{Activation, Padding};
pub use tape::{backward, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape plus row-major data. Activations and weights are NCHW.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid_shape(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Splits along axis 1 into `[.., first, ..]` and `[.., rest, ..]`.
    pub fn split_channels(&self, first: usize) -> Result<(Self, Self)> {
        if self.shape.len() < 2 || first > self.shape[1] {
            return Err(Error::invalid_shape(
                "split_channels",
                format!("cannot take {first} channels from {:?}", self.shape),
            ));
        }
        let outer = self.shape[0];
        let inner: usize = self.shape[2..].iter().product();
        let total = self.shape[1];
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for o in 0..outer {
            let row = &self.data[o * total * inner..(o + 1) * total * inner];
            a.extend_from_slice(&row[..first * inner]);
            b.extend_from_slice(&row[first * inner..]);
        }
        let mut sa = self.shape.clone();
        sa[1] = first;
        let mut sb = self.shape.clone();
        sb[1] = total - first;
        Ok((Self::new(sa, a)?, Self::new(sb, b)?))
    }

    /// Stacks same-shape tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}
