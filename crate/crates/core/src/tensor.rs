//! Named dense tensors and the small set of linear-algebra kernels the
//! runtime needs.
//!
//! Storage is row-major `f64`. Values only drop to `f32` at the checkpoint
//! boundary.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let numel = checked_numel(&dims)
            .ok_or_else(|| Error::Shape(format!("{name}: invalid dims {dims:?}")))?;
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "{name}: dims {dims:?} hold {numel} elements but data has {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        Ok(Self { name, dims, data })
    }

    pub fn zeros(name: impl Into<String>, dims: Vec<usize>) -> Self {
        let numel = checked_numel(&dims).expect("dims must be non-empty and positive");
        Self {
            name: name.into(),
            dims,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(name: impl Into<String>, dims: Vec<usize>, value: f64) -> Result<Self> {
        let numel = checked_numel(&dims).ok_or_else(|| Error::Shape(format!("invalid dims {dims:?}")))?;
        Self::new(name, dims, vec![value; numel])
    }

    pub fn identity(name: impl Into<String>, n: usize) -> Self {
        let mut t = Self::zeros(name, vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Rows and columns of a 2-D tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape(format!(
                "{} is not a matrix (dims {:?})",
                self.name, self.dims
            ))),
        }
    }

    pub fn same_shape(&self, other: &ParamTensor) -> bool {
        self.dims == other.dims
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn from_parts_unchecked(name: String, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(checked_numel(&dims), Some(data.len()));
        Self { name, dims, data }
    }

    pub(crate) fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{op} ({})", self.name)))
        }
    }
}

/// Element count for `dims`, or `None` if dims are empty, contain a zero,
/// or overflow.
pub fn checked_numel(dims: &[usize]) -> Option<usize> {
    if dims.is_empty() || dims.contains(&0) {
        return None;
    }
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Matrix product `a · b`.
pub fn matmul(a: &ParamTensor, b: &ParamTensor) -> Result<ParamTensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul {} {:?} by {} {:?}: inner dims {k} != {k2}",
            a.name, a.dims, b.name, b.dims
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(1.0, &a.data, false, &b.data, false, 0.0, &mut out, m, k, n);
    let t = ParamTensor::from_parts_unchecked(format!("{}*{}", a.name, b.name), vec![m, n], out);
    t.ensure_finite("matmul")?;
    Ok(t)
}

/// `alpha · x + y`, elementwise. The result takes `y`'s name.
pub fn axpy(alpha: f64, x: &ParamTensor, y: &ParamTensor) -> Result<ParamTensor> {
    if !x.same_shape(y) {
        return Err(Error::Shape(format!(
            "axpy {} {:?} with {} {:?}",
            x.name, x.dims, y.name, y.dims
        )));
    }
    let data = x.data.iter().zip(&y.data).map(|(xv, yv)| alpha * xv + yv).collect();
    let t = ParamTensor::from_parts_unchecked(y.name.clone(), y.dims.clone(), data);
    t.ensure_finite("axpy")?;
    Ok(t)
}

/// Row-major GEMM: `c (m×n) = alpha · op(a) · op(b) + beta · c`.
///
/// `op(a)` is m×k; when `a_t` is set, `a` is stored as k×m and used
/// transposed. Likewise `b` is k×n, or n×k when `b_t` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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
