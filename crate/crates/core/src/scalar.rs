//! Scalar abstraction shared by every numerical module.

use faer::prelude::SpSolver;
use nalgebra::{DMatrix, RealField};
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable throughout the crate (`f32` or `f64`).
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + std::fmt::Display + 'static
{
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar conversion from f64")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar conversion to f64")
    }

    #[inline]
    fn from_usize_lossy(k: usize) -> Self {
        Self::from_usize(k).expect("scalar conversion from usize")
    }

    /// Solves `a x = b` by LU with partial pivoting; `None` when singular or non-finite.
    fn lu_solve(a: &DMatrix<Self>, b: &DMatrix<Self>) -> Option<DMatrix<Self>>;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            fn lu_solve(a: &DMatrix<$t>, b: &DMatrix<$t>) -> Option<DMatrix<$t>> {
                let n = a.nrows();
                if a.ncols() != n || b.nrows() != n {
                    return None;
                }
                let fa = faer::mat::from_column_major_slice::<$t>(a.as_slice(), n, n);
                let fb = faer::mat::from_column_major_slice::<$t>(b.as_slice(), n, b.ncols());
                let x = fa.partial_piv_lu().solve(fb);
                let out = DMatrix::from_fn(n, b.ncols(), |i, j| x.read(i, j));
                out.iter().all(|v| v.is_finite()).then_some(out)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// `a x = b` for a single right-hand side.
pub fn lu_solve_vec<T: Real>(a: &DMatrix<T>, b: &nalgebra::DVector<T>) -> Option<nalgebra::DVector<T>> {
    let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    T::lu_solve(a, &rhs).map(|x| nalgebra::DVector::from_column_slice(x.as_slice()))
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle<T: Real>(tau: T) -> T {
    let two_pi = T::two_pi();
    let mut t = tau % two_pi;
    if t < T::zero() {
        t += two_pi;
    }
    if t >= two_pi {
        t -= two_pi;
    }
    t
}
