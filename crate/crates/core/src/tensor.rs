//! Dense N-dimensional tensors with mode-n unfolding and mode-n products.
//!
//! Storage is row-major (last index fastest). Modes are 0-based in this API:
//! mode `n` of a tensor with shape `(I₀, …, I_{N-1})` is the axis of length `Iₙ`.
//!
//! The mode-`n` unfolding is the `Iₙ × ∏_{m≠n} I_m` matrix whose row `i` holds
//! every entry with `n`-th index equal to `i`. Columns enumerate the remaining
//! indices in increasing mode order, row-major, so for shape `(I₀, I₁, I₂)`
//! and mode 1 the column of entry `(a, i, c)` is `a·I₂ + c`.

use crate::error::{QrrError, Result};
use crate::kernels;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(QrrError::ShapeMismatch("tensor order must be at least 1".into()));
        }
        if shape.contains(&0) {
            return Err(QrrError::ShapeMismatch(format!("zero-length dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(QrrError::ShapeMismatch(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![T::zero(); numel]).expect("valid zero shape")
    }

    /// Builds a tensor by evaluating `f` on each flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..numel).map(f).collect()).expect("valid shape")
    }

    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
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

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for d in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * self.shape[d + 1];
        }
        strides
    }

    pub fn get(&self, index: &[usize]) -> T {
        let flat = index.iter().zip(self.strides()).fold(0, |acc, (&i, s)| acc + i * s);
        self.data[flat]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix (product of all trailing dimensions otherwise).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_norm(&self) -> T {
        max_abs(&self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(QrrError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn check_matrix(&self, what: &str) -> Result<()> {
        if self.order() != 2 {
            return Err(QrrError::ShapeMismatch(format!(
                "{what} must be a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        self.check_matrix("transpose operand")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.check_matrix("left operand")?;
        other.check_matrix("right operand")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(QrrError::ShapeMismatch(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Self::matrix(m, n, out)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            return Err(QrrError::ModeOutOfRange {
                mode,
                order: self.order(),
            });
        }
        Ok(())
    }

    /// (left, dim, right) extents around `mode`.
    fn split(shape: &[usize], mode: usize) -> (usize, usize, usize) {
        let left = shape[..mode].iter().product();
        let right = shape[mode + 1..].iter().product();
        (left, shape[mode], right)
    }

    /// Mode-`mode` matricization. See the module docs for the column order.
    pub fn unfold(&self, mode: usize) -> Result<Self> {
        self.check_mode(mode)?;
        let (left, dim, right) = Self::split(&self.shape, mode);
        let cols = left * right;
        let mut out = vec![T::zero(); dim * cols];
        for l in 0..left {
            for i in 0..dim {
                let src = &self.data[(l * dim + i) * right..(l * dim + i + 1) * right];
                out[i * cols + l * right..i * cols + (l + 1) * right].copy_from_slice(src);
            }
        }
        Self::matrix(dim, cols, out)
    }

    /// Inverse of [`Tensor::unfold`].
    pub fn fold(matrix: &Self, mode: usize, shape: &[usize]) -> Result<Self> {
        matrix.check_matrix("fold operand")?;
        if mode >= shape.len() {
            return Err(QrrError::ModeOutOfRange {
                mode,
                order: shape.len(),
            });
        }
        let (left, dim, right) = Self::split(shape, mode);
        let cols = left * right;
        if matrix.shape != [dim, cols] {
            return Err(QrrError::ShapeMismatch(format!(
                "cannot fold {:?} along mode {mode} into {shape:?}",
                matrix.shape
            )));
        }
        let mut out = vec![T::zero(); dim * cols];
        for l in 0..left {
            for i in 0..dim {
                let src = &matrix.data[i * cols + l * right..i * cols + (l + 1) * right];
                out[(l * dim + i) * right..(l * dim + i + 1) * right].copy_from_slice(src);
            }
        }
        Self::new(shape.to_vec(), out)
    }

    /// Mode-`mode` product `self ×ₙ f` with `f` of shape `J × Iₙ`.
    pub fn mode_n_product(&self, f: &Self, mode: usize) -> Result<Self> {
        self.check_mode(mode)?;
        f.check_matrix("mode product factor")?;
        let (left, dim, right) = Self::split(&self.shape, mode);
        let (j_dim, f_cols) = (f.shape[0], f.shape[1]);
        if f_cols != dim {
            return Err(QrrError::ShapeMismatch(format!(
                "factor {j_dim}x{f_cols} cannot multiply mode {mode} of length {dim}"
            )));
        }
        let mut out = vec![T::zero(); left * j_dim * right];
        for l in 0..left {
            // out block (j_dim × right) = f (j_dim × dim) · x block (dim × right)
            let x_block = &self.data[l * dim * right..(l + 1) * dim * right];
            let o_block = &mut out[l * j_dim * right..(l + 1) * j_dim * right];
            kernels::gemm_nn(j_dim, dim, right, &f.data, x_block, o_block);
        }
        let mut shape = self.shape.clone();
        shape[mode] = j_dim;
        Self::new(shape, out)
    }
}

pub fn max_abs<T: Scalar>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}
