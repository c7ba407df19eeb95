//! Dense row-major tensors over a configurable float width.

use num_traits::Float;
use std::fmt;

/// Float width the engine runs at. `f64` is the test/oracle mode with
/// headroom for gradient checks, `f32` is the training mode.
pub trait Scalar:
    Float
    + num_traits::NumAssignOps
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    /// Width of one element in bytes.
    const WIDTH: usize;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const WIDTH: usize = 4;

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const WIDTH: usize = 8;

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Convert an `f64` constant into the active scalar type.
#[inline]
pub fn real<T: Scalar>(x: f64) -> T {
    T::from(x).expect("f64 representable in scalar type")
}

/// Dense row-major tensor. Shape product always equals the data length.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * n);
        for row in rows {
            assert_eq!(row.len(), n, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![m, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row count of a 2D tensor (a 1D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Column count of a 1D or 2D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        let n = self.cols();
        self.data[i * n + j] = v;
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> T {
        assert!(self.is_scalar(), "scalar_value() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Squared L2 norm of all entries, accumulated in f64.
    pub fn sq_norm_f64(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64().unwrap_or(0.0);
                x * x
            })
            .sum()
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} incompatible with length {}",
            shape,
            self.data.len()
        );
        Tensor {
            shape,
            data: self.data.clone(),
        }
    }

    /// 2D transpose.
    pub fn transposed(&self) -> Self {
        assert_eq!(self.shape.len(), 2, "transpose needs a 2D tensor");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

/// C += A @ B with A: [m,k], B: [k,n]. The j-inner loop keeps the hot path
/// sequential over both output and B rows so it auto-vectorizes.
pub fn matmul_nn_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += aip * b_row[j];
            }
        }
    }
}

/// C += A @ B^T with A: [m,k], B: [n,k].
pub fn matmul_nt_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            c_row[j] += acc;
        }
    }
}

/// C += A^T @ B with A: [k,m], B: [k,n].
pub fn matmul_tn_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += api * b_row[j];
            }
        }
    }
}
