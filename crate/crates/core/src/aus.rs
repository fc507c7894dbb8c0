//! Alternating U/S-domain evaluation of nonlinear forces.
//!
//! Layout conventions:
//! - coefficient vectors are DOF-major with `k_d` fastest, i.e. a column-major
//!   array `[U_d, …, U_1, n]`;
//! - grid arrays are DOF-major with `τ₁` fastest, a column-major `[S_1, …, S_d, n]`;
//! - pointwise Jacobian pages are `[S_1, …, S_d, n, n]`, the two trailing axes
//!   being the row and column of the `n × n` Jacobian at each grid point.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::basis::{BasisMatrices, BasisSpec};
use crate::error::{Error, Result};
use crate::models::SecondOrderSystem;
use crate::scalar::Real;
use crate::tensorkit::relayout;

/// Equispaced tensor grid, one row per point with `τ₁` varying fastest.
pub fn sgrid(specs: &[BasisSpec]) -> DMatrix<f64> {
    let sizes: Vec<usize> = specs.iter().map(BasisSpec::s).collect();
    let total: usize = sizes.iter().product();
    let mut grid = DMatrix::zeros(total, specs.len());
    for g in 0..total {
        let mut rem = g;
        for (i, &s) in sizes.iter().enumerate() {
            grid[(g, i)] = std::f64::consts::TAU * (rem % s) as f64 / s as f64;
            rem /= s;
        }
    }
    grid
}

fn apply_left<T: Real>(m: &DMatrix<T>, data: &[T]) -> DMatrix<T> {
    let rows = m.ncols();
    let view = DMatrixView::from_slice(data, rows, data.len() / rows);
    m * view
}

/// Constant transforms for one torus discretization, with a single-entry cache
/// of the last grid evaluation.
#[derive(Debug)]
pub struct AusWorkspace<T: Real> {
    n: usize,
    bases: Arc<[BasisMatrices<T>]>,
    /// `w0t[i][(k + U k', s)] = Γinv[k, s] Γ⁰[s, k']`
    w0t: Vec<DMatrix<T>>,
    /// `w1t[i][(k + U k', s)] = Γinv[k, s] Γ¹[s, k']`
    w1t: Vec<DMatrix<T>>,
    cache: Mutex<Option<GridCache<T>>>,
    cache_enabled: AtomicBool,
    grid_evaluations: AtomicUsize,
}

#[derive(Debug)]
struct GridCache<T: Real> {
    zd: Vec<T>,
    omega: Vec<T>,
    states: Arc<GridStates<T>>,
}

/// S-grid states and forces at one point.
#[derive(Clone, Debug)]
pub struct GridStates<T> {
    pub z0: Vec<T>,
    pub zdot0: Vec<T>,
    pub f0: Vec<T>,
    pub dz: Vec<T>,
    pub dzdot: Vec<T>,
}

impl<T: Real> AusWorkspace<T> {
    pub fn new(n: usize, bases: Arc<[BasisMatrices<T>]>) -> Result<Self> {
        if n == 0 || bases.is_empty() {
            return Err(Error::Shape("workspace needs n ≥ 1 and d ≥ 1".into()));
        }
        let mut w0t = Vec::with_capacity(bases.len());
        let mut w1t = Vec::with_capacity(bases.len());
        for b in bases.iter() {
            let (u, s) = (b.u(), b.s());
            if b.gamma0.shape() != (s, u) || b.gamma1.shape() != (s, u) || b.gamma0inv.shape() != (u, s) {
                return Err(Error::Shape("inconsistent transform sizes".into()));
            }
            let mut a = DMatrix::zeros(u * u, s);
            let mut c = DMatrix::zeros(u * u, s);
            for j in 0..s {
                for kp in 0..u {
                    for k in 0..u {
                        a[(k + u * kp, j)] = b.gamma0inv[(k, j)] * b.gamma0[(j, kp)];
                        c[(k + u * kp, j)] = b.gamma0inv[(k, j)] * b.gamma1[(j, kp)];
                    }
                }
            }
            w0t.push(a);
            w1t.push(c);
        }
        Ok(Self {
            n,
            bases,
            w0t,
            w1t,
            cache: Mutex::new(None),
            cache_enabled: AtomicBool::new(true),
            grid_evaluations: AtomicUsize::new(0),
        })
    }

    pub fn from_specs(n: usize, specs: &[BasisSpec]) -> Result<Self> {
        let bases: Vec<BasisMatrices<T>> = specs.iter().map(crate::basis::build).collect::<Result<_>>()?;
        Self::new(n, bases.into())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.bases.len()
    }

    pub fn bases(&self) -> &Arc<[BasisMatrices<T>]> {
        &self.bases
    }

    /// `Π Uᵢ`.
    pub fn coeff_count(&self) -> usize {
        self.bases.iter().map(|b| b.u()).product()
    }

    /// `Π Sᵢ`.
    pub fn grid_count(&self) -> usize {
        self.bases.iter().map(|b| b.s()).product()
    }

    pub fn set_cache_enabled(&self, on: bool) {
        self.cache_enabled.store(on, Ordering::Relaxed);
        if !on {
            *self.cache.lock().expect("cache lock") = None;
        }
    }

    /// Number of times the model was evaluated on the full grid.
    pub fn grid_evaluations(&self) -> usize {
        self.grid_evaluations.load(Ordering::Relaxed)
    }

    fn check_coeffs(&self, zd: &[T]) -> Result<()> {
        let want = self.n * self.coeff_count();
        if zd.len() != want {
            return Err(Error::Shape(format!(
                "coefficient vector has {} entries, expected {want}",
                zd.len()
            )));
        }
        Ok(())
    }

    fn check_omega(&self, omega: &[T]) -> Result<()> {
        if omega.len() != self.d() {
            return Err(Error::Shape(format!(
                "{} frequencies given for a {}-torus",
                omega.len(),
                self.d()
            )));
        }
        Ok(())
    }

    /// Coefficients to grid displacements and velocities.
    pub fn uts(&self, zd: &[T], omega: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.check_coeffs(zd)?;
        self.check_omega(omega)?;
        let n = self.n;
        let total_u = self.coeff_count();
        let mut z = relayout(zd, &[total_u, n], &[1, 0], &[n * total_u])?;
        let mut zdot = vec![T::zero(); z.len()];
        let mut rows = n;
        for i in (0..self.d()).rev() {
            let b = &self.bases[i];
            let ui = b.u();
            let uprev: usize = self.bases[..i].iter().map(|b| b.u()).product();
            let shape = [rows, ui, uprev];
            let target = [ui, rows * uprev];
            let zt = relayout(&z, &shape, &[1, 0, 2], &target)?;
            let zdt = relayout(&zdot, &shape, &[1, 0, 2], &target)?;
            let znew = apply_left(&b.gamma0, &zt);
            let zdnew = apply_left(&b.gamma1, &zt) * omega[i] + apply_left(&b.gamma0, &zdt);
            z = znew.as_slice().to_vec();
            zdot = zdnew.as_slice().to_vec();
            rows *= b.s();
        }
        Ok((z, zdot))
    }

    /// Grid forces to coefficients.
    pub fn stu1(&self, f0: &[T]) -> Result<Vec<T>> {
        let n = self.n;
        if f0.len() != n * self.grid_count() {
            return Err(Error::Shape(format!(
                "grid array has {} entries, expected {}",
                f0.len(),
                n * self.grid_count()
            )));
        }
        let mut x = f0.to_vec();
        let mut cols = 1usize;
        for b in self.bases.iter() {
            let (ui, si) = (b.u(), b.s());
            let rows = x.len() / (si * cols);
            let y = apply_left(&b.gamma0inv, &x);
            x = relayout(y.as_slice(), &[ui, rows, cols], &[1, 0, 2], &[rows, ui * cols])?;
            cols *= ui;
        }
        relayout(&x, &[n, cols], &[1, 0], &[n * cols])
    }

    /// Pointwise Jacobian pages to the coefficient-space Jacobian `∂F^d/∂Z^d`.
    pub fn stu2(&self, dz: &[T], dzdot: &[T], omega: &[T]) -> Result<DMatrix<T>> {
        self.check_omega(omega)?;
        let n = self.n;
        let g = self.grid_count();
        if dz.len() != n * n * g || dzdot.len() != n * n * g {
            return Err(Error::Shape(format!(
                "Jacobian pages must hold {} entries",
                n * n * g
            )));
        }
        let d = self.d();
        let mut a = dz.to_vec();
        let mut bv = dzdot.to_vec();
        let mut p = n;
        for i in 0..d {
            let basis = &self.bases[i];
            let (ui, si) = (basis.u(), basis.s());
            let rest = a.len() / (si * p * p);
            let view_a = DMatrixView::from_slice(&a, si, rest * p * p);
            let view_b = DMatrixView::from_slice(&bv, si, rest * p * p);
            let mut next_a = &self.w0t[i] * &view_a;
            next_a.gemm(omega[i], &self.w1t[i], &view_b, T::one());
            let (s_next, rest_next) = if i + 1 < d {
                let s = self.bases[i + 1].s();
                (s, rest / s)
            } else {
                (1, 1)
            };
            let from = [ui, ui, s_next, rest_next, p, p];
            let perm = [2, 3, 0, 4, 1, 5];
            let len = [next_a.len()];
            a = relayout(next_a.as_slice(), &from, &perm, &len)?;
            if i + 1 < d {
                let next_b = &self.w0t[i] * &view_b;
                bv = relayout(next_b.as_slice(), &from, &perm, &len)?;
            }
            p *= ui;
        }
        Ok(DMatrix::from_vec(p, p, a))
    }

    /// Partial derivative of grid velocities with respect to `ωᵢ`.
    pub fn velocity_partial(&self, zd: &[T], i: usize) -> Result<Vec<T>> {
        let mut unit = vec![T::zero(); self.d()];
        unit[i] = T::one();
        Ok(self.uts(zd, &unit)?.1)
    }

    /// Evaluates the model on the grid, reusing the previous result when `zd`
    /// and `omega` are unchanged.
    pub fn grid_states(
        &self,
        system: &dyn SecondOrderSystem<T>,
        zd: &[T],
        omega: &[T],
    ) -> Result<Arc<GridStates<T>>> {
        let caching = self.cache_enabled.load(Ordering::Relaxed);
        if caching {
            if let Some(c) = self.cache.lock().expect("cache lock").as_ref() {
                if c.zd == zd && c.omega == omega {
                    return Ok(c.states.clone());
                }
            }
        }
        let (z0, zdot0) = self.uts(zd, omega)?;
        let n = self.n;
        let g = self.grid_count();
        let mut f0 = vec![T::zero(); n * g];
        let mut dz = vec![T::zero(); n * n * g];
        let mut dzdot = vec![T::zero(); n * n * g];
        let mut zp = vec![T::zero(); n];
        let mut vp = vec![T::zero(); n];
        let mut fp = vec![T::zero(); n];
        let mut jz = vec![T::zero(); n * n];
        let mut jv = vec![T::zero(); n * n];
        for pt in 0..g {
            for l in 0..n {
                zp[l] = z0[pt + g * l];
                vp[l] = zdot0[pt + g * l];
            }
            system.force(&zp, &vp, &mut fp);
            system.force_jacobians(&zp, &vp, &mut jz, &mut jv);
            for l in 0..n {
                f0[pt + g * l] = fp[l];
            }
            for e in 0..n * n {
                dz[pt + g * e] = jz[e];
                dzdot[pt + g * e] = jv[e];
            }
        }
        self.grid_evaluations.fetch_add(1, Ordering::Relaxed);
        let states = Arc::new(GridStates {
            z0,
            zdot0,
            f0,
            dz,
            dzdot,
        });
        if caching {
            *self.cache.lock().expect("cache lock") = Some(GridCache {
                zd: zd.to_vec(),
                omega: omega.to_vec(),
                states: states.clone(),
            });
        }
        Ok(states)
    }

    /// `F^d` and `∂F^d/∂Z^d` at `zd`.
    pub fn eval_nonlinear(
        &self,
        system: &dyn SecondOrderSystem<T>,
        zd: &[T],
        omega: &[T],
    ) -> Result<(DVector<T>, DMatrix<T>)> {
        let st = self.grid_states(system, zd, omega)?;
        let fd = DVector::from_vec(self.stu1(&st.f0)?);
        let dfd = self.stu2(&st.dz, &st.dzdot, omega)?;
        Ok((fd, dfd))
    }
}

/// Multiply-add counts of the structured pipeline and of a monolithic
/// transform with the same grid, `(n²Σᵢ(SᵢUᵢ + UᵢSᵢ²)(U₁ⁱ⁻¹)²S_{i+1}^d, n²(SU + US²))`.
pub fn operation_counts(n: usize, u: &[usize], s: &[usize]) -> (f64, f64) {
    let n2 = (n * n) as f64;
    let d = u.len();
    let mut structured = 0.0;
    for i in 0..d {
        let (ui, si) = (u[i] as f64, s[i] as f64);
        let uprev: f64 = u[..i].iter().map(|&x| x as f64).product();
        let snext: f64 = s[i + 1..].iter().map(|&x| x as f64).product();
        structured += (si * ui + ui * si * si) * uprev * uprev * snext;
    }
    let ut: f64 = u.iter().map(|&x| x as f64).product();
    let st: f64 = s.iter().map(|&x| x as f64).product();
    (n2 * structured, n2 * (st * ut + ut * st * st))
}

/// Ratio of monolithic to structured operation counts for `d` identical dimensions.
pub fn operation_ratio(u: usize, s: usize, d: usize) -> f64 {
    let (a, b) = operation_counts(1, &vec![u; d], &vec![s; d]);
    b / a
}

/// Dense operators equivalent to the AUS pipelines, for small cases.
pub mod reference {
    use super::*;
    use crate::tensorkit::{diag_expand, kron, Tensor3};

    /// Permutation matrix taking Kronecker ordering `(l, s₁, …, s_d)` with `s_d`
    /// fastest to grid ordering `(s₁ fastest, …, l slowest)`.
    fn grid_permutation<T: Real>(n: usize, s: &[usize]) -> DMatrix<T> {
        let total: usize = n * s.iter().product::<usize>();
        let mut shape: Vec<usize> = s.iter().rev().copied().collect();
        shape.push(n);
        let d = s.len();
        let mut perm: Vec<usize> = (0..d).rev().collect();
        perm.push(d);
        let idx: Vec<usize> = (0..total).collect();
        let moved = relayout(&idx, &shape, &perm, &[total]).expect("valid permutation");
        let mut p = DMatrix::zeros(total, total);
        for (row, &src) in moved.iter().enumerate() {
            p[(row, src)] = T::one();
        }
        p
    }

    fn kron_chain<T: Real>(n: usize, mats: &[&DMatrix<T>]) -> DMatrix<T> {
        let mut acc = DMatrix::identity(n, n);
        for m in mats {
            acc = kron(&acc, m).expect("small reference operator");
        }
        acc
    }

    /// `(T0, [T1_i])`: grid displacements are `T0·zd`, velocities `Σ ωᵢ T1_i·zd`.
    pub fn uts_matrices<T: Real>(bases: &[BasisMatrices<T>], n: usize) -> (DMatrix<T>, Vec<DMatrix<T>>) {
        let s: Vec<usize> = bases.iter().map(|b| b.s()).collect();
        let p = grid_permutation::<T>(n, &s);
        let g0: Vec<&DMatrix<T>> = bases.iter().map(|b| &b.gamma0).collect();
        let t0 = &p * kron_chain(n, &g0);
        let t1 = (0..bases.len())
            .map(|i| {
                let mut mats = g0.clone();
                mats[i] = &bases[i].gamma1;
                &p * kron_chain(n, &mats)
            })
            .collect();
        (t0, t1)
    }

    /// Dense STU-1 operator.
    pub fn stu1_matrix<T: Real>(bases: &[BasisMatrices<T>], n: usize) -> DMatrix<T> {
        let s: Vec<usize> = bases.iter().map(|b| b.s()).collect();
        let p = grid_permutation::<T>(n, &s);
        let inv: Vec<&DMatrix<T>> = bases.iter().map(|b| &b.gamma0inv).collect();
        kron_chain(n, &inv) * p.transpose()
    }

    /// Block matrix acting pointwise on grid arrays, assembled from Jacobian pages.
    pub fn pointwise_operator<T: Real>(pages: &[T], n: usize, g: usize) -> DMatrix<T> {
        let mut out = DMatrix::zeros(n * g, n * g);
        for r in 0..n {
            for c in 0..n {
                let diag: Vec<T> = (0..g).map(|pt| pages[pt + g * (r + n * c)]).collect();
                let t = Tensor3::new([g, 1, 1], diag).expect("page vector");
                let block = diag_expand(&t).expect("unit middle dimension").page(0);
                out.view_mut((r * g, c * g), (g, g)).copy_from(&block);
            }
        }
        out
    }

    /// Dense `∂F^d/∂Z^d` from the chain rule through the dense transforms.
    pub fn stu2_dense<T: Real>(
        bases: &[BasisMatrices<T>],
        n: usize,
        dz: &[T],
        dzdot: &[T],
        omega: &[T],
    ) -> DMatrix<T> {
        let g: usize = bases.iter().map(|b| b.s()).product();
        let (t0, t1) = uts_matrices(bases, n);
        let mut tv = DMatrix::zeros(t0.nrows(), t0.ncols());
        for (i, m) in t1.iter().enumerate() {
            tv += m * omega[i];
        }
        let a = pointwise_operator(dz, n, g);
        let b = pointwise_operator(dzdot, n, g);
        stu1_matrix(bases, n) * (a * t0 + b * tv)
    }
}
