use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Element type of a [`Tensor`]. Training runs in `f32`, gradient
/// verification in `f64`.
pub trait Scalar: Float + Debug + Default + Send + Sync + Sum + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. Every kernel in this crate works on rank-2
/// views; a vector is a `1 x n` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1, 1], vec![value])
    }

    /// Builds a matrix by stacking equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
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

    /// Rows of the rank-2 view. Rank-1 tensors are treated as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Self {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let a = self.row(i);
            let o = &mut out[i * m..(i + 1) * m];
            for (p, &av) in a.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let b = &other.data[p * m..(p + 1) * m];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov = *ov + av * bv;
                }
            }
        }
        Self::matrix(n, m, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Self {
        let (n, k) = (self.rows(), self.cols());
        let (m, k2) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul_t inner dims {k} vs {k2}");
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out[i * m + j] = dot(a, other.row(j));
            }
        }
        Self::matrix(n, m, out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Self {
        let (k, n) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        assert_eq!(k, k2, "t_matmul inner dims {k} vs {k2}");
        let mut out = vec![T::zero(); n * m];
        for p in 0..k {
            let a = self.row(p);
            let b = other.row(p);
            for (i, &av) in a.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let o = &mut out[i * m..(i + 1) * m];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov = *ov + av * bv;
                }
            }
        }
        Self::matrix(n, m, out)
    }

    /// Affine map `self · weight + bias` with `bias` broadcast over rows.
    pub fn affine(&self, weight: &Self, bias: &Self) -> Self {
        let mut out = self.matmul(weight);
        assert_eq!(bias.len(), out.cols(), "bias width");
        let m = out.cols();
        for row in out.data.chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o = *o + b;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len(), "add_assign shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Row-wise L2 normalization, `x / max(‖x‖, eps)`.
    pub fn l2_normalize_rows(&self, eps: T) -> Self {
        let mut out = self.clone();
        let c = self.cols();
        for row in out.data.chunks_mut(c) {
            let n = norm(row).max(eps);
            row.iter_mut().for_each(|x| *x = *x / n);
        }
        out
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let ab = a.matmul(&b);
        assert_eq!(ab.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(a.matmul_t(&b.transpose()), ab);
        assert_eq!(a.transpose().t_matmul(&b), ab);
    }

    #[test]
    fn rank_views() {
        let v = Tensor::new(vec![4], vec![1.0f32; 4]);
        assert_eq!((v.rows(), v.cols()), (1, 4));
        let t = Tensor::<f64>::zeros(&[2, 3, 5]);
        assert_eq!((t.rows(), t.cols()), (6, 5));
    }

    #[test]
    fn normalize_guards_zero_rows() {
        let t = Tensor::matrix(2, 2, vec![3.0f64, 4.0, 0.0, 0.0]);
        let n = t.l2_normalize_rows(1e-8);
        assert_eq!(n.data(), &[0.6, 0.8, 0.0, 0.0]);
    }
}
