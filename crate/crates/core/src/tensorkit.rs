//! Dense relayout and Kronecker kernels.
//!
//! Every multi-dimensional array in the crate is linearized column-major: the
//! first axis varies fastest. [`relayout`] interprets a buffer under that
//! convention, permutes its axes and re-linearizes it, which is the only data
//! movement primitive the alternating U/S pipelines use.

use nalgebra::{DMatrix, DMatrixView};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense column-major matrix used for every operator in the crate.
pub type DenseMatrix<T> = DMatrix<T>;

/// Default cap on the element count of any allocated operator (2³¹).
pub const DEFAULT_ELEMENT_CAP: usize = 1 << 31;

/// Checks that `rows × cols` stays below `cap`.
pub fn check_size(rows: usize, cols: usize, cap: usize) -> Result<()> {
    let elements = rows as u128 * cols as u128;
    if elements > cap as u128 {
        return Err(Error::DimensionTooLarge { elements, cap });
    }
    Ok(())
}

/// Kronecker product `a ⊗ b` with the default size cap.
pub fn kron<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    kron_capped(a, b, DEFAULT_ELEMENT_CAP)
}

/// Kronecker product `a ⊗ b`, failing with [`Error::DimensionTooLarge`] when the
/// result would exceed `cap` elements.
pub fn kron_capped<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, cap: usize) -> Result<DMatrix<T>> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let rows = ar.checked_mul(br).ok_or(Error::DimensionTooLarge {
        elements: ar as u128 * br as u128,
        cap,
    })?;
    let cols = ac.checked_mul(bc).ok_or(Error::DimensionTooLarge {
        elements: ac as u128 * bc as u128,
        cap,
    })?;
    check_size(rows, cols, cap)?;
    let mut out = DMatrix::<T>::zeros(rows, cols);
    kron_add_into(&mut out, T::one(), a, b);
    Ok(out)
}

/// Accumulates `scale · (a ⊗ b)` into `out`, skipping zero entries of `a`.
pub(crate) fn kron_add_into<T: Real>(out: &mut DMatrix<T>, scale: T, a: &DMatrix<T>, b: &DMatrix<T>) {
    let (br, bc) = b.shape();
    debug_assert_eq!(out.nrows(), a.nrows() * br);
    debug_assert_eq!(out.ncols(), a.ncols() * bc);
    for ja in 0..a.ncols() {
        for ia in 0..a.nrows() {
            let s = a[(ia, ja)] * scale;
            if s == T::zero() {
                continue;
            }
            for jb in 0..bc {
                let col = ja * bc + jb;
                let dst = &mut out.column_mut(col);
                let src = b.column(jb);
                for ib in 0..br {
                    dst[ia * br + ib] += s * src[ib];
                }
            }
        }
    }
}

/// `(a ⊗ b)·x` without forming the product, as `vec(b·X·aᵀ)`.
pub fn kron_matvec<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, x: &[T]) -> Result<Vec<T>> {
    if x.len() != a.ncols() * b.ncols() {
        return Err(Error::Shape(format!(
            "vector of length {} does not match a {}-column Kronecker product",
            x.len(),
            a.ncols() * b.ncols()
        )));
    }
    let xm = DMatrixView::from_slice(x, b.ncols(), a.ncols());
    let y = (b * xm) * a.transpose();
    Ok(y.as_slice().to_vec())
}

/// Column-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len());
    let mut acc = 1;
    for &d in shape {
        s.push(acc);
        acc *= d;
    }
    s
}

fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    if perm.len() != rank {
        return Err(Error::Shape(format!(
            "permutation {perm:?} does not match rank {rank}"
        )));
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::Shape(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Interprets `data` as a column-major tensor of `from_shape`, permutes its axes
/// so that output axis `k` is input axis `perm[k]`, and re-linearizes the result
/// column-major as `to_shape`.
pub fn relayout<T: Copy>(
    data: &[T],
    from_shape: &[usize],
    perm: &[usize],
    to_shape: &[usize],
) -> Result<Vec<T>> {
    let count: usize = from_shape.iter().product();
    let target: usize = to_shape.iter().product();
    if count != data.len() || target != count {
        return Err(Error::Shape(format!(
            "cannot relayout {} elements from {from_shape:?} to {to_shape:?}",
            data.len()
        )));
    }
    check_perm(perm, from_shape.len())?;
    if count == 0 {
        return Ok(Vec::new());
    }
    if perm.iter().enumerate().all(|(k, &p)| k == p) {
        return Ok(data.to_vec());
    }

    let (from_shape, perm) = simplify(from_shape, perm);
    if perm.iter().enumerate().all(|(k, &p)| k == p) {
        return Ok(data.to_vec());
    }
    let in_strides = strides(&from_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| from_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();

    let mut out = Vec::with_capacity(count);
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    // The innermost output axis is walked in a tight loop.
    let inner_len = out_shape[0];
    let inner_step = step[0];
    let outer = count / inner_len;
    for _ in 0..outer {
        let mut o = offset;
        for _ in 0..inner_len {
            out.push(data[o]);
            o += inner_step;
        }
        for k in 1..rank {
            index[k] += 1;
            offset += step[k];
            if index[k] < out_shape[k] {
                break;
            }
            offset -= step[k] * out_shape[k];
            index[k] = 0;
        }
    }
    Ok(out)
}

/// Drops unit axes and fuses runs of output axes that are already adjacent
/// in the input, which leaves the permutation's effect unchanged.
fn simplify(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = perm.iter().copied().filter(|&a| shape[a] != 1).collect();
    // runs of consecutive input axes, in output order
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &a in &kept {
        match runs.last_mut() {
            Some((_, end)) if *end + 1 == a => *end = a,
            _ => runs.push((a, a)),
        }
    }
    let mut by_input: Vec<usize> = (0..runs.len()).collect();
    by_input.sort_by_key(|&r| runs[r].0);
    let fused: Vec<usize> = by_input
        .iter()
        .map(|&r| (runs[r].0..=runs[r].1).map(|a| shape[a]).product())
        .collect();
    let mut new_perm = vec![0; runs.len()];
    for (pos, &r) in by_input.iter().enumerate() {
        new_perm[r] = pos;
    }
    (fused, new_perm)
}

/// Matrix form of [`relayout`]: `to_shape` must have one or two axes.
pub fn relayout_matrix<T: Real>(
    x: &DMatrix<T>,
    from_shape: &[usize],
    perm: &[usize],
    to_shape: &[usize],
) -> Result<DMatrix<T>> {
    let (rows, cols) = match *to_shape {
        [r] => (r, 1),
        [r, c] => (r, c),
        _ => {
            return Err(Error::Shape(format!(
                "matrix relayout target must be rank 1 or 2, got {to_shape:?}"
            )))
        }
    };
    let data = relayout(x.as_slice(), from_shape, perm, to_shape)?;
    Ok(DMatrix::from_vec(rows, cols, data))
}

/// Three-axis column-major array whose `d1 × d2` pages are stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "tensor of dims {dims:?} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        let [d1, d2, _] = self.dims;
        self.data[i + d1 * (j + d2 * k)]
    }

    /// Page `k` as a `d1 × d2` matrix.
    pub fn page(&self, k: usize) -> DMatrix<T> {
        let [d1, d2, _] = self.dims;
        let len = d1 * d2;
        DMatrix::from_column_slice(d1, d2, &self.data[k * len..(k + 1) * len])
    }
}

/// Turns every length-`d1` page vector of a `d1 × 1 × d3` tensor into a
/// `d1 × d1` diagonal page.
pub fn diag_expand<T: Real>(x: &Tensor3<T>) -> Result<Tensor3<T>> {
    let [d1, d2, d3] = x.dims;
    if d2 != 1 {
        return Err(Error::Shape(format!(
            "diag_expand needs a unit middle dimension, got {:?}",
            x.dims
        )));
    }
    let mut out = Tensor3::zeros([d1, d1, d3]);
    for k in 0..d3 {
        for i in 0..d1 {
            out.data[i + d1 * (i + d1 * k)] = x.data[i + d1 * k];
        }
    }
    Ok(out)
}
