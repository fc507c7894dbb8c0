//! Multi-step variable-coefficient operator: assembly of `K^d`, `Θ^d`, the
//! algebraic residual `R = K^d Z^d + Θ^d (F^d − E^d)` and its Jacobians.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aus::{sgrid, AusWorkspace};
use crate::basis::{build, synthesize_rows, BasisMatrices, BasisSpec};
use crate::error::{Error, Result};
use crate::models::SecondOrderSystem;
use crate::scalar::Real;
use crate::tensorkit::{check_size, kron_add_into, kron_matvec, DEFAULT_ELEMENT_CAP};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
    #[default]
    Unknown,
}

/// One solution on a branch: coefficients, frequencies and parameter value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct TorusPoint<T> {
    pub zd: Vec<T>,
    pub omega: Vec<T>,
    pub p: T,
    #[serde(default)]
    pub tangent: Option<Vec<T>>,
    #[serde(default)]
    pub stability: Stability,
}

impl<T: Real> TorusPoint<T> {
    pub fn new(zd: Vec<T>, omega: Vec<T>, p: T) -> Self {
        Self {
            zd,
            omega,
            p,
            tangent: None,
            stability: Stability::Unknown,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.zd.iter().chain(&self.omega).all(|x| x.is_finite()) || !self.p.is_finite() {
            return Err(Error::NumericalBlowup("non-finite torus point".into()));
        }
        if self.omega.iter().any(|w| *w <= T::zero()) {
            return Err(Error::InvalidOptions("frequencies must be positive".into()));
        }
        Ok(())
    }
}

/// `n·ΠUᵢ + d`: coefficients plus one unknown frequency per dimension.
pub fn unknown_count(n: usize, u: &[usize]) -> usize {
    n * u.iter().product::<usize>() + u.len()
}

/// Assembled operator at fixed frequencies.
#[derive(Clone, Debug)]
pub struct VcfOperator<T: Real> {
    system: Arc<dyn SecondOrderSystem<T>>,
    specs: Vec<BasisSpec>,
    aus: Arc<AusWorkspace<T>>,
    omega: Vec<T>,
    /// `M⁰ … M^{d−1}`
    mass_levels: Vec<DMatrix<T>>,
    /// `D⁰ … D^{d−1}`
    damping_levels: Vec<DMatrix<T>>,
    kd: DMatrix<T>,
    thetad: DMatrix<T>,
    theta_identity: bool,
    /// Nonzeros of each row of `Θ^d`.
    theta_rows: Vec<Vec<(usize, T)>>,
    ed: DVector<T>,
    excitation_scale: T,
    cap: usize,
}

impl<T: Real> VcfOperator<T> {
    pub fn assemble(system: Arc<dyn SecondOrderSystem<T>>, specs: &[BasisSpec], omega: &[T]) -> Result<Self> {
        Self::assemble_capped(system, specs, omega, DEFAULT_ELEMENT_CAP)
    }

    /// Assembly that fails when `K^d` would hold more than `cap` entries.
    pub fn assemble_capped(
        system: Arc<dyn SecondOrderSystem<T>>,
        specs: &[BasisSpec],
        omega: &[T],
        cap: usize,
    ) -> Result<Self> {
        let n = system.n();
        let total: u128 = specs.iter().map(|s| s.u() as u128).product::<u128>() * n as u128;
        if total * total > cap as u128 {
            return Err(Error::DimensionTooLarge {
                elements: total * total,
                cap,
            });
        }
        let bases: Vec<BasisMatrices<T>> = specs.iter().map(build).collect::<Result<_>>()?;
        let aus = Arc::new(AusWorkspace::new(n, bases.into())?);
        Self::assemble_with(system, specs, aus, omega, cap)
    }

    fn assemble_with(
        system: Arc<dyn SecondOrderSystem<T>>,
        specs: &[BasisSpec],
        aus: Arc<AusWorkspace<T>>,
        omega: &[T],
        cap: usize,
    ) -> Result<Self> {
        let d = specs.len();
        let n = system.n();
        if d == 0 {
            return Err(Error::InvalidBasis("at least one torus dimension is required".into()));
        }
        if d < system.excitation_count() {
            return Err(Error::InvalidModel(format!(
                "{} excitation frequencies need at least as many torus dimensions, got {d}",
                system.excitation_count()
            )));
        }
        if omega.len() != d {
            return Err(Error::Shape(format!("{} frequencies for {d} dimensions", omega.len())));
        }
        if !omega.iter().all(|w| w.is_finite()) {
            return Err(Error::NumericalBlowup("non-finite frequency".into()));
        }
        if system.theta().shape() != (n, n) {
            return Err(Error::InvalidModel("Θ⁰ must be n × n".into()));
        }
        let total = n * aus.coeff_count();
        check_size(total, total, cap)?;

        let bases = aus.bases().clone();
        let mut m = system.mass().clone();
        let mut dm = system.damping().clone();
        let mut k = system.stiffness().clone();
        let mut theta = system.theta().clone();
        let mut mass_levels = Vec::with_capacity(d);
        let mut damping_levels = Vec::with_capacity(d);
        for (i, b) in bases.iter().enumerate() {
            let w = omega[i];
            let size = m.nrows() * b.u();
            let last = i + 1 == d;
            let mut k_next = DMatrix::zeros(size, size);
            kron_add_into(&mut k_next, w * w, &m, &b.ups2);
            kron_add_into(&mut k_next, w, &dm, &b.ups1);
            kron_add_into(&mut k_next, T::one(), &k, &b.ups0);
            let mut theta_next = DMatrix::zeros(size, size);
            kron_add_into(&mut theta_next, T::one(), &theta, &b.ups0);
            if last {
                mass_levels.push(std::mem::replace(&mut m, DMatrix::zeros(0, 0)));
                damping_levels.push(std::mem::replace(&mut dm, DMatrix::zeros(0, 0)));
            } else {
                let mut m_next = DMatrix::zeros(size, size);
                kron_add_into(&mut m_next, T::one(), &m, &b.ups0);
                let mut d_next = DMatrix::zeros(size, size);
                kron_add_into(&mut d_next, w + w, &m, &b.ups1);
                kron_add_into(&mut d_next, T::one(), &dm, &b.ups0);
                mass_levels.push(std::mem::replace(&mut m, m_next));
                damping_levels.push(std::mem::replace(&mut dm, d_next));
            }
            k = k_next;
            theta = theta_next;
        }

        let grid = grid_points::<T>(specs);
        let g = grid.len();
        let mut e0 = vec![T::zero(); n * g];
        let mut buf = vec![T::zero(); n];
        for (pt, tau) in grid.iter().enumerate() {
            system.excitation(tau, omega, &mut buf);
            for l in 0..n {
                e0[pt + g * l] = buf[l];
            }
        }
        let ed = DVector::from_vec(aus.stu1(&e0)?);
        let theta_identity = theta.is_identity(T::zero());
        let theta_rows = (0..theta.nrows())
            .map(|r| {
                (0..theta.ncols())
                    .filter(|&c| theta[(r, c)] != T::zero())
                    .map(|c| (c, theta[(r, c)]))
                    .collect()
            })
            .collect();

        Ok(Self {
            system,
            specs: specs.to_vec(),
            aus,
            omega: omega.to_vec(),
            mass_levels,
            damping_levels,
            kd: k,
            thetad: theta,
            theta_identity,
            theta_rows,
            ed,
            excitation_scale: T::one(),
            cap,
        })
    }

    /// Reassembles at new frequencies, reusing the basis transforms.
    pub fn at_omega(&self, omega: &[T]) -> Result<Self> {
        let op = Self::assemble_with(self.system.clone(), &self.specs, self.aus.clone(), omega, self.cap)?;
        Ok(op.with_excitation_scale(self.excitation_scale))
    }

    /// Multiplies the excitation by `scale`.
    pub fn with_excitation_scale(mut self, scale: T) -> Self {
        self.excitation_scale = scale;
        self
    }

    pub fn excitation_scale(&self) -> T {
        self.excitation_scale
    }

    pub fn system(&self) -> &Arc<dyn SecondOrderSystem<T>> {
        &self.system
    }

    pub fn specs(&self) -> &[BasisSpec] {
        &self.specs
    }

    pub fn aus(&self) -> &Arc<AusWorkspace<T>> {
        &self.aus
    }

    pub fn bases(&self) -> &[BasisMatrices<T>] {
        self.aus.bases()
    }

    pub fn omega(&self) -> &[T] {
        &self.omega
    }

    pub fn n(&self) -> usize {
        self.system.n()
    }

    pub fn d(&self) -> usize {
        self.specs.len()
    }

    /// Length of `Z^d`.
    pub fn coeff_len(&self) -> usize {
        self.n() * self.aus.coeff_count()
    }

    pub fn unknown_count(&self) -> usize {
        self.coeff_len() + self.d()
    }

    pub fn kd(&self) -> &DMatrix<T> {
        &self.kd
    }

    pub fn thetad(&self) -> &DMatrix<T> {
        &self.thetad
    }

    /// `M^i` for `i < d`.
    pub fn mass_level(&self, i: usize) -> Result<&DMatrix<T>> {
        self.mass_levels.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.mass_levels.len(),
        })
    }

    /// `D^i` for `i < d`.
    pub fn damping_level(&self, i: usize) -> Result<&DMatrix<T>> {
        self.damping_levels.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.damping_levels.len(),
        })
    }

    /// `M^d`, formed on demand since it does not enter the residual.
    pub fn assembled_mass(&self) -> DMatrix<T> {
        let last = self.d() - 1;
        let m = &self.mass_levels[last];
        let b = &self.bases()[last];
        let mut out = DMatrix::zeros(m.nrows() * b.u(), m.ncols() * b.u());
        kron_add_into(&mut out, T::one(), m, &b.ups0);
        out
    }

    /// `E^d`, including the excitation scale.
    pub fn excitation_coeffs(&self) -> DVector<T> {
        &self.ed * self.excitation_scale
    }

    /// `E^d` at unit excitation scale.
    pub fn unit_excitation_coeffs(&self) -> &DVector<T> {
        &self.ed
    }

    fn check_len(&self, zd: &[T]) -> Result<()> {
        if zd.len() != self.coeff_len() {
            return Err(Error::Shape(format!(
                "coefficient vector has {} entries, expected {}",
                zd.len(),
                self.coeff_len()
            )));
        }
        Ok(())
    }

    /// `F^d(Z^d)`, zero for linear systems.
    pub fn nonlinear_coeffs(&self, zd: &[T]) -> Result<DVector<T>> {
        self.check_len(zd)?;
        if self.system.is_linear() {
            return Ok(DVector::zeros(zd.len()));
        }
        let st = self.aus.grid_states(self.system.as_ref(), zd, &self.omega)?;
        Ok(DVector::from_vec(self.aus.stu1(&st.f0)?))
    }

    /// `Θ^d · v`.
    pub fn apply_theta(&self, v: DVector<T>) -> DVector<T> {
        if self.theta_identity {
            v
        } else {
            &self.thetad * v
        }
    }

    pub fn residual(&self, zd: &[T]) -> Result<DVector<T>> {
        let fd = self.nonlinear_coeffs(zd)?;
        let inner = fd - self.excitation_coeffs();
        Ok(&self.kd * DVector::from_column_slice(zd) + self.apply_theta(inner))
    }

    /// `∂F^d/∂Z^d`.
    pub fn nonlinear_jacobian(&self, zd: &[T]) -> Result<DMatrix<T>> {
        self.check_len(zd)?;
        let nu = zd.len();
        if self.system.is_linear() {
            return Ok(DMatrix::zeros(nu, nu));
        }
        let st = self.aus.grid_states(self.system.as_ref(), zd, &self.omega)?;
        self.aus.stu2(&st.dz, &st.dzdot, &self.omega)
    }

    /// `∂R/∂Z^d = K^d + Θ^d ∂F^d/∂Z^d`.
    pub fn jacobian_z(&self, zd: &[T]) -> Result<DMatrix<T>> {
        self.check_len(zd)?;
        if self.system.is_linear() {
            return Ok(self.kd.clone());
        }
        let dfd = self.nonlinear_jacobian(zd)?;
        if self.theta_identity {
            return Ok(dfd + &self.kd);
        }
        let mut j = self.kd.clone();
        for c in 0..j.ncols() {
            let src = dfd.column(c);
            let mut dst = j.column_mut(c);
            for (r, row) in self.theta_rows.iter().enumerate() {
                let mut acc = T::zero();
                for &(k, v) in row {
                    acc += v * src[k];
                }
                dst[r] += acc;
            }
        }
        Ok(j)
    }

    /// `(∂K^d/∂ωᵢ)·Z^d` by differentiating the assembly recursion (`i` is 0-based).
    pub fn stiffness_omega_derivative(&self, i: usize, zd: &[T]) -> Result<DVector<T>> {
        let d = self.d();
        if i >= d {
            return Err(Error::IndexOutOfRange { index: i, len: d });
        }
        self.check_len(zd)?;
        let bases = self.bases();
        let w = &self.omega;
        let (m, dm) = (&self.mass_levels[i], &self.damping_levels[i]);
        let bi = &bases[i];
        if i + 1 == d {
            let mut y = kron_matvec(m, &(&bi.ups2 * (w[i] + w[i])), zd)?;
            let y2 = kron_matvec(dm, &bi.ups1, zd)?;
            for (a, b) in y.iter_mut().zip(y2) {
                *a += b;
            }
            return Ok(DVector::from_vec(y));
        }
        let size = m.nrows() * bi.u();
        let mut dd = DMatrix::zeros(size, size);
        kron_add_into(&mut dd, T::lit(2.0), m, &bi.ups1);
        let mut dk = DMatrix::zeros(size, size);
        kron_add_into(&mut dk, w[i] + w[i], m, &bi.ups2);
        kron_add_into(&mut dk, T::one(), dm, &bi.ups1);
        for j in i + 1..d - 1 {
            let b = &bases[j];
            let size = dd.nrows() * b.u();
            let mut dd_next = DMatrix::zeros(size, size);
            kron_add_into(&mut dd_next, T::one(), &dd, &b.ups0);
            let mut dk_next = DMatrix::zeros(size, size);
            kron_add_into(&mut dk_next, w[j], &dd, &b.ups1);
            kron_add_into(&mut dk_next, T::one(), &dk, &b.ups0);
            dd = dd_next;
            dk = dk_next;
        }
        let b = &bases[d - 1];
        let mut y = kron_matvec(&dd, &(&b.ups1 * w[d - 1]), zd)?;
        let y2 = kron_matvec(&dk, &b.ups0, zd)?;
        for (a, b) in y.iter_mut().zip(y2) {
            *a += b;
        }
        Ok(DVector::from_vec(y))
    }

    /// `∂E^d/∂ωᵢ` (unscaled), or `None` when the excitation does not depend on `ωᵢ`.
    pub fn excitation_omega_derivative(&self, i: usize) -> Result<Option<DVector<T>>> {
        let n = self.n();
        let grid = grid_points::<T>(&self.specs);
        let g = grid.len();
        let mut e0 = vec![T::zero(); n * g];
        let mut buf = vec![T::zero(); n];
        let mut any = false;
        for (pt, tau) in grid.iter().enumerate() {
            if self.system.excitation_omega_derivative(tau, &self.omega, i, &mut buf) {
                any = true;
                for l in 0..n {
                    e0[pt + g * l] = buf[l];
                }
            }
        }
        if !any {
            return Ok(None);
        }
        Ok(Some(DVector::from_vec(self.aus.stu1(&e0)?)))
    }

    /// Full partial `∂R/∂ωᵢ` at fixed `Z^d` (`i` is 0-based): the stiffness
    /// term, the velocity dependence of `F^d`, and a frequency-dependent excitation.
    pub fn jacobian_omega(&self, i: usize, zd: &[T]) -> Result<DVector<T>> {
        let mut y = self.stiffness_omega_derivative(i, zd)?;
        let n = self.n();
        let mut inner = DVector::zeros(zd.len());
        let mut any = false;
        if !self.system.is_linear() {
            let st = self.aus.grid_states(self.system.as_ref(), zd, &self.omega)?;
            let dv = self.aus.velocity_partial(zd, i)?;
            let g = self.aus.grid_count();
            let mut df = vec![T::zero(); n * g];
            for r in 0..n {
                for c in 0..n {
                    for pt in 0..g {
                        df[pt + g * r] += st.dzdot[pt + g * (r + n * c)] * dv[pt + g * c];
                    }
                }
            }
            inner += DVector::from_vec(self.aus.stu1(&df)?);
            any = true;
        }
        if let Some(de) = self.excitation_omega_derivative(i)? {
            inner -= de * self.excitation_scale;
            any = true;
        }
        if any {
            y += self.apply_theta(inner);
        }
        Ok(y)
    }

    /// Displacements and velocities at arbitrary torus angles.
    pub fn synthesize(&self, zd: &[T], taus: &DMatrix<f64>) -> Result<StateSamples<T>> {
        synthesize(&self.specs, self.n(), zd, &self.omega, taus)
    }
}

fn grid_points<T: Real>(specs: &[BasisSpec]) -> Vec<Vec<T>> {
    let grid = sgrid(specs);
    (0..grid.nrows())
        .map(|r| grid.row(r).iter().map(|&x| T::lit(x)).collect())
        .collect()
}

/// Sampled states, one row per torus point and one column per DOF.
#[derive(Clone, Debug)]
pub struct StateSamples<T: Real> {
    pub z: DMatrix<T>,
    pub zdot: DMatrix<T>,
}

fn contract<T: Real>(block: &[T], rows: &[&[f64]], u: &[usize]) -> T {
    let mut cur: Vec<T> = block.to_vec();
    for i in (0..u.len()).rev() {
        let ui = u[i];
        let rest = cur.len() / ui;
        let row = rows[i];
        cur = (0..rest)
            .map(|r| {
                let mut acc = T::zero();
                for k in 0..ui {
                    acc += T::lit(row[k]) * cur[k + ui * r];
                }
                acc
            })
            .collect();
    }
    cur[0]
}

/// `Z⁰(τ) = [I ⊗ Φ₁(τ₁) ⊗ … ⊗ Φ_d(τ_d)] Z^d` and its time derivative
/// `Σ ωᵢ ∂Z⁰/∂τᵢ`, for each row of `taus`.
pub fn synthesize<T: Real>(
    specs: &[BasisSpec],
    n: usize,
    zd: &[T],
    omega: &[T],
    taus: &DMatrix<f64>,
) -> Result<StateSamples<T>> {
    let d = specs.len();
    let u: Vec<usize> = specs.iter().map(BasisSpec::u).collect();
    let total: usize = u.iter().product();
    if zd.len() != n * total {
        return Err(Error::Shape(format!(
            "coefficient vector has {} entries, expected {}",
            zd.len(),
            n * total
        )));
    }
    if taus.ncols() != d || omega.len() != d {
        return Err(Error::Shape("angles and frequencies must have one entry per dimension".into()));
    }
    let p = taus.nrows();
    let mut z = DMatrix::zeros(p, n);
    let mut zdot = DMatrix::zeros(p, n);
    for pt in 0..p {
        let rows: Vec<(Vec<f64>, Vec<f64>)> = specs
            .iter()
            .enumerate()
            .map(|(i, s)| synthesize_rows(s, taus[(pt, i)]))
            .collect();
        let values: Vec<&[f64]> = rows.iter().map(|r| r.0.as_slice()).collect();
        for l in 0..n {
            let block = &zd[l * total..(l + 1) * total];
            z[(pt, l)] = contract(block, &values, &u);
            let mut v = T::zero();
            for j in 0..d {
                let mut mixed = values.clone();
                mixed[j] = rows[j].1.as_slice();
                v += omega[j] * contract(block, &mixed, &u);
            }
            zdot[(pt, l)] = v;
        }
    }
    Ok(StateSamples { z, zdot })
}
