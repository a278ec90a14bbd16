//! Dense row-major matrices and the scalar trait shared by the model code.
//!
//! Everything the network touches is a 2D matrix: a batch of token rows
//! times a feature dimension. Sequences are stored as consecutive groups of
//! rows, so a `[G*S, D]` tensor holds `G` sequences of length `S`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the model can be evaluated in.
///
/// Training runs in `f32`; gradient checking runs in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Number of bytes in the little-endian encoding.
    const BYTES: usize;

    /// `c = alpha * op(a) * op(b) + beta * c` on row-major storage.
    ///
    /// `a` is `m x k` after the optional transpose, `b` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        c: &mut [Self],
        beta: Self,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $bytes:expr) => {
        impl Scalar for $t {
            const BYTES: usize = $bytes;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                c: &mut [Self],
                beta: Self,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // stored a is m x k (row stride k) or k x m (row stride m)
                let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
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

impl_scalar!(f32, matrixmultiply::sgemm, 4);
impl_scalar!(f64, matrixmultiply::dgemm, 8);

/// Row-major matrix of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    /// Same data viewed with a different shape.
    pub fn reshaped(mut self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len());
        self.rows = rows;
        self.cols = cols;
        self
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Tensor::zeros(self.rows, other.cols);
        T::gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            false,
            &other.data,
            false,
            &mut out.data,
            T::zero(),
        );
        out
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Converts element type, e.g. `f32` parameters to `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}
