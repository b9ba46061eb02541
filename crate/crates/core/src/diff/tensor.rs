use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, rejecting zero-sized dimensions, length mismatch and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(format!("element {i} of tensor {shape:?}")));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for op outputs; finiteness is checked by the graph.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err("ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows and columns when viewed as a matrix over the leading dimension.
    pub fn rows_cols(&self) -> (usize, usize) {
        let r = self.shape[0];
        (r, self.data.len() / r)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Ok(Self::raw(shape.to_vec(), self.data.clone()))
    }

    /// Flattens every dimension after the first.
    pub fn flatten_rows(&self) -> Self {
        let (r, c) = self.rows_cols();
        Self::raw(vec![r, c], self.data.clone())
    }

    /// Gathers leading-dimension slices by index.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let (_, c) = self.rows_cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::raw(shape, data)
    }

    /// Stacks tensors along the leading dimension.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(shape_err(format!(
                    "concat {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self::raw(shape, data))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.rows_cols();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::raw(vec![c, r], out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b * b)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }
}

/// `a (m×k) · b (k×n)`, sequential accumulation in index order.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.rows_cols();
        let (k2, n) = other.rows_cols();
        if k != k2 || self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(shape_err(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor::raw(vec![m, n], matmul(&self.data, &other.data, m, k, n)))
    }

    /// `selfᵀ · other` for 2-D tensors sharing the row count.
    pub fn t_matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, m) = self.rows_cols();
        let (k2, n) = other.rows_cols();
        if k != k2 {
            return Err(shape_err(format!(
                "t_matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor::raw(vec![m, n], matmul_tn(&self.data, &other.data, k, m, n)))
    }
}
