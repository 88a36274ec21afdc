//! Dense row-major tensors over `f32`/`f64`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;

use num_traits::Float;

use crate::error::{LensError, Result};

/// Floating point element type usable on the tape.
///
/// `f32` is the training type; `f64` exists so gradient checks can run at
/// tight tolerances through the very same code.
pub trait Real: Float + Default + Debug + Send + Sync + Sum + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = op(a) * op(b) + beta * c` for row-major operands, where `op`
    /// optionally transposes. `a` is `m x k` after `op`, `b` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: bounds asserted above; strides describe the row-major
                // (optionally transposed) layouts of the three buffers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A dense tensor. Values are stored row-major; the product of the extents
/// always equals `data.len()`.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(LensError::Shape(alloc::format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LensError::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::matrix(rows.len(), cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent; vectors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Plain (tape-free) matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 || self.shape.len() > 2 || other.shape.len() > 2 {
            return Err(LensError::Shape(alloc::format!(
                "matmul of {:?} and {:?}",
                self.shape,
                other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data, false, &other.data, false, T::zero(), &mut out);
        Self::matrix(m, n, out)
    }
}

/// Numerically stable softmax of a slice into `out`, restricted to positions
/// where `mask` is true (masked positions receive exactly zero).
pub fn softmax_into<T: Real>(x: &[T], mask: Option<&[bool]>, out: &mut [T]) {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let mut max = T::neg_infinity();
    for (i, &v) in x.iter().enumerate() {
        if keep(i) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (i, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        *o = if keep(i) { (v - max).exp() } else { T::zero() };
        sum = sum + *o;
    }
    if sum > T::zero() {
        let inv = T::one() / sum;
        for o in out.iter_mut() {
            *o = *o * inv;
        }
    }
}

/// Softmax of a vector.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.is_empty() {
        return Err(LensError::Contract("softmax of an empty vector".into()));
    }
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(LensError::Numeric("NaN in softmax input".into()));
    }
    let mut out = vec![T::zero(); x.len()];
    softmax_into(x.data(), None, &mut out);
    Tensor::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let eye = Tensor::<f32>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[&[5.0], &[7.0]]).unwrap();
        assert_eq!(eye.matmul(&v).unwrap().data(), &[5.0, 7.0]);
    }

    #[test]
    fn hand_computed_matmul() {
        let a = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax(&Tensor::<f64>::new(&[2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::<f64>::new(&[2], vec![core::f64::consts::LN_2, 0.0]).unwrap()).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = Tensor::<f64>::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let shifted = x.map(|v| v + 1000.0);
        let a = softmax(&x).unwrap();
        let b = softmax(&shifted).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::<f32>::new(&[2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(softmax(&x), Err(LensError::Numeric(_))));
    }

    #[test]
    fn masked_positions_get_zero_mass() {
        let mut out = [0.0f32; 4];
        softmax_into(&[1.0, 5.0, 2.0, 9.0], Some(&[true, false, true, false]), &mut out);
        assert_eq!(out[1], 0.0);
        assert_eq!(out[3], 0.0);
        assert!((out[0] + out[2] - 1.0).abs() < 1e-6);
    }
}
