//! Dense 4-D tensors in (batch, channel, height, width) layout and the
//! reverse-mode autodiff tape built on them.
//!
//! `Tensor` is a plain value: shape plus a row-major buffer. Differentiable
//! computation happens on a [`Tape`], which records every operation and can
//! replay the graph backwards to accumulate gradients into its leaves.

mod conv;
mod elem;
pub mod gradcheck;
pub mod io;
mod tape;

pub use elem::Elem;
pub use tape::{Activation, Tape, Var};

use std::fmt;

/// Errors from tensor construction and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },
    #[error("backward: loss must have shape (1,1,1,1), got {got}")]
    NonScalarLoss { got: Shape },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dimensions of a 4-D tensor: batch, channels, height, width.
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

    /// Shape of a scalar value.
    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn dims(self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// True when only the channel count differs from `other`.
    pub fn same_spatial(self, other: Shape) -> bool {
        self.n == other.n && self.h == other.h && self.w == other.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array of real values, row-major in (n, c, h, w) order.
///
/// The element type is `f32` for training builds and `f64` for gradient
/// checking, selected by the caller via the `E` parameter.
#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Elem> Tensor<E> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![E::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: E) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Wrap an existing buffer; the length must match the shape.
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: format!(
                    "buffer holds {} values but shape {} needs {}",
                    data.len(),
                    shape,
                    shape.numel()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// A (1,1,1,1) tensor holding one value.
    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Flat offset of element (n, c, y, x).
    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> E {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut E {
        let i = self.offset(n, c, y, x);
        &mut self.data[i]
    }

    /// Value of a (1,1,1,1) tensor.
    pub fn scalar_value(&self) -> E {
        debug_assert_eq!(self.shape, Shape::scalar());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert between element precisions (through f64).
    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<E: Elem> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, {:?}, ...]", self.data[0], self.data[1])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::<f32>::from_vec(Shape::new(1, 2, 2, 2), vec![0.0; 7]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
        assert!(err.to_string().contains('8'));
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::<f32>::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| {
            (((n * 3 + c) * 4 + y) * 5 + x) as f32
        });
        for (i, &v) in t.data().iter().enumerate() {
            assert_eq!(v, i as f32);
        }
        assert_eq!(t.at(1, 2, 3, 4), (t.numel() - 1) as f32);
    }

    #[test]
    fn cast_roundtrip_is_exact_for_f32_values() {
        let t = Tensor::<f32>::from_fn(Shape::new(1, 1, 2, 2), |_, _, y, x| {
            0.1 * (y as f32) + x as f32
        });
        let back: Tensor<f32> = t.cast::<f64>().cast::<f32>();
        assert_eq!(t, back);
    }
}
