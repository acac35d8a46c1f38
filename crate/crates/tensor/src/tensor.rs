use std::fmt;

use crate::counter::OpCounter;
use crate::error::{Result, TensorError};
use crate::real::{gemm, Layout};
use crate::{Real, Rng};

/// Dense row-major n-dimensional array.
///
/// `shape.iter().product() == data.len()` always holds. Public operations
/// reject non-finite results instead of propagating them.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::shape(
                "new",
                format!("shape {shape:?} holds {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| {
            if i / n == i % n {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.normal() * std))
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn rand_uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.uniform_range(-bound, bound)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} of extent {ext}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::shape(
                "zip_with",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len().max(1) as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        T::all_finite(&self.data)
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Matrix product of `m×k` and `k×p` operands. Records `m·k·p` MACs.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, p) = matmul_dims("matmul", &self.shape, &other.shape)?;
        OpCounter::record((m * k * p) as u64);
        let mut out = vec![T::zero(); m * p];
        gemm(
            m,
            k,
            p,
            &self.data,
            Layout::Normal,
            &other.data,
            Layout::Normal,
            &mut out,
            false,
        );
        Self::new(&[m, p], out)?.check_finite("matmul")
    }

    /// Softmax over the trailing axis, stabilized by max-subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        if !self.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let mut out = self.data.clone();
        softmax_in_place(&mut out, self.last_dim());
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::shape("transpose", "expected rank 2"));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Self::from_fn(&[c, r], |i| self.data[(i % r) * c + i / r]))
    }
}

pub(crate) fn matmul_dims(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(TensorError::shape(op, format!("{a:?} @ {b:?}")));
    }
    Ok((a[0], a[1], b[1]))
}

pub(crate) fn softmax_in_place<T: Real>(data: &mut [T], row: usize) {
    if row == 0 {
        return;
    }
    for chunk in data.chunks_mut(row) {
        let max = chunk.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in chunk.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = T::one() / total;
        for v in chunk.iter_mut() {
            *v *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product_is_noop() {
        let mut rng = Rng::new(0);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let y = Tensor::identity(3).matmul(&x).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::new(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn matmul_counts_macs_by_triple_loop() {
        let mut rng = Rng::new(1);
        let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[7, 2], 1.0, &mut rng);
        let mut loops = 0u64;
        for _ in 0..5 {
            for _ in 0..2 {
                for _ in 0..7 {
                    loops += 1;
                }
            }
        }
        let (_, macs) = OpCounter::measure(|| a.matmul(&b).unwrap());
        assert_eq!(macs, loops);
        assert_eq!(macs, 70);
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let s = Tensor::new(&[3], vec![0.0f64; 3]).unwrap().softmax_rows().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let (x, c) = (0.7f64, 1.9f64);
        let s = Tensor::new(&[2], vec![x, x + c]).unwrap().softmax_rows().unwrap();
        let logistic = |z: f64| 1.0 / (1.0 + (-z).exp());
        assert!((s.data()[0] - logistic(-c)).abs() < 1e-12);
        assert!((s.data()[1] - logistic(c)).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::new(&[2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(t.softmax_rows(), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
