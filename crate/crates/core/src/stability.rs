//! Floquet analysis of periodic solutions, Lyapunov exponents of tori and
//! initialization of a two-frequency torus at a Neimark-Sacker point.

use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aus::{sgrid, AusWorkspace};
use crate::basis::{trig_interp_row, BasisSpec};
use crate::continuation::{BifurcationKind, Inspection, PointMonitor};
use crate::error::{Error, Result};
use crate::models::SecondOrderSystem;
use crate::scalar::Real;
use crate::vcf::{synthesize, Stability, TorusPoint, VcfOperator};

pub type Complex64 = Complex<f64>;

/// Default multiplier tolerance of the Floquet verdict.
pub const FLOQUET_TOL: f64 = 1e-8;
/// Exponents at or below this value are declared stable.
pub const LYAPUNOV_STABLE_TOL: f64 = 1e-2;
/// Allowed spread of running exponent estimates over the final fifth of the run.
pub const LYAPUNOV_SETTLE_TOL: f64 = 1e-2;

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [f64; 5] = [
    1.495585217958292e-2,
    2.539398330063230e-1,
    9.504178996162932e-1,
    2.097847961257068,
    5.371920351148152,
];

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let a2 = a * a;
    let mut u = DMatrix::identity(n, n) * b[1];
    let mut v = DMatrix::identity(n, n) * b[0];
    let mut pw = DMatrix::identity(n, n);
    for k in 1..b.len() / 2 {
        pw = &pw * &a2;
        u += &pw * b[2 * k + 1];
        v += &pw * b[2 * k];
    }
    (a * u, v)
}

fn pade13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let b = &PADE13;
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = a * (&a6 * inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    (u, v)
}

/// Matrix exponential by Padé approximation with scaling and squaring.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Shape("matrix exponential of a non-square matrix".into()));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalBlowup("non-finite entry in matrix exponential".into()));
    }
    let norm = norm1(a);
    let mut squarings = 0;
    let (u, v) = if norm <= THETA[0] {
        pade_low(a, &PADE3)
    } else if norm <= THETA[1] {
        pade_low(a, &PADE5)
    } else if norm <= THETA[2] {
        pade_low(a, &PADE7)
    } else if norm <= THETA[3] {
        pade_low(a, &PADE9)
    } else {
        squarings = (norm / THETA[4]).log2().ceil().max(0.0) as i32;
        pade13(&(a / 2f64.powi(squarings)))
    };
    let mut r = (&v - &u).lu().solve(&(&v + &u)).ok_or(Error::Singular("matrix exponential"))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

/// State-space Jacobian `[[0, I], [−M⁻¹(K + Θ∂F/∂z), −M⁻¹(D + Θ∂F/∂ż)]]`.
pub fn state_jacobian<T: Real>(system: &dyn SecondOrderSystem<T>, z: &[T], zdot: &[T]) -> Result<DMatrix<f64>> {
    let lin = LinearParts::new(system)?;
    Ok(lin.jacobian(system, z, zdot))
}

/// First-order vector field `ẋ = f(x, τ)` with `x = [z; ż]`.
pub fn vector_field<T: Real>(
    system: &dyn SecondOrderSystem<T>,
    x: &[T],
    tau: &[T],
    omega: &[T],
    excitation_scale: T,
) -> Result<Vec<T>> {
    let n = system.n();
    if x.len() != 2 * n {
        return Err(Error::Shape(format!("state has {} entries, expected {}", x.len(), 2 * n)));
    }
    let (z, zd) = x.split_at(n);
    let mut f = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    system.force(z, zd, &mut f);
    system.excitation(tau, omega, &mut e);
    let fe = DVector::from_iterator(n, f.iter().zip(&e).map(|(&f, &e)| f - excitation_scale * e));
    let zv = DVector::from_column_slice(z);
    let vv = DVector::from_column_slice(zd);
    let rhs = -(system.damping() * &vv + system.stiffness() * &zv + system.theta() * fe);
    let acc = system.mass().clone().lu().solve(&rhs).ok_or(Error::Singular("mass matrix"))?;
    Ok(zd.iter().copied().chain(acc.iter().copied()).collect())
}

#[derive(Clone, Debug)]
struct LinearParts {
    n: usize,
    minv_k: DMatrix<f64>,
    minv_d: DMatrix<f64>,
    minv_theta: DMatrix<f64>,
}

impl LinearParts {
    fn new<T: Real>(system: &dyn SecondOrderSystem<T>) -> Result<Self> {
        let cast = |m: &DMatrix<T>| m.map(|x| x.as_f64());
        let lu = cast(system.mass()).lu();
        let solve = |m: DMatrix<f64>| lu.solve(&m).ok_or(Error::Singular("mass matrix"));
        Ok(Self {
            n: system.n(),
            minv_k: solve(cast(system.stiffness()))?,
            minv_d: solve(cast(system.damping()))?,
            minv_theta: solve(cast(system.theta()))?,
        })
    }

    fn jacobian<T: Real>(&self, system: &dyn SecondOrderSystem<T>, z: &[T], zdot: &[T]) -> DMatrix<f64> {
        let n = self.n;
        let mut dz = vec![T::zero(); n * n];
        let mut dv = vec![T::zero(); n * n];
        let mut lower_z = self.minv_k.clone();
        let mut lower_v = self.minv_d.clone();
        if !system.is_linear() {
            system.force_jacobians(z, zdot, &mut dz, &mut dv);
            let fz = DMatrix::from_iterator(n, n, dz.iter().map(|x| x.as_f64()));
            let fv = DMatrix::from_iterator(n, n, dv.iter().map(|x| x.as_f64()));
            lower_z += &self.minv_theta * fz;
            lower_v += &self.minv_theta * fv;
        }
        let mut j = DMatrix::zeros(2 * n, 2 * n);
        j.view_mut((0, n), (n, n)).fill_with_identity();
        j.view_mut((n, 0), (n, n)).copy_from(&(-lower_z));
        j.view_mut((n, n), (n, n)).copy_from(&(-lower_v));
        j
    }
}

/// Linearization `Δẋ = J(τ)Δx` of the first-order system around a torus.
#[derive(Clone, Debug)]
pub struct PerturbationSystem<T: Real> {
    system: Arc<dyn SecondOrderSystem<T>>,
    specs: Vec<BasisSpec>,
    zd: Vec<T>,
    omega: Vec<T>,
    lin: LinearParts,
}

impl<T: Real> PerturbationSystem<T> {
    pub fn new(op: &VcfOperator<T>, zd: &[T]) -> Result<Self> {
        if zd.len() != op.coeff_len() {
            return Err(Error::Shape(format!(
                "coefficient vector has {} entries, expected {}",
                zd.len(),
                op.coeff_len()
            )));
        }
        Ok(Self {
            lin: LinearParts::new(op.system().as_ref())?,
            system: op.system().clone(),
            specs: op.specs().to_vec(),
            zd: zd.to_vec(),
            omega: op.omega().to_vec(),
        })
    }

    pub fn n(&self) -> usize {
        self.lin.n
    }

    pub fn d(&self) -> usize {
        self.specs.len()
    }

    pub fn omega(&self) -> Vec<f64> {
        self.omega.iter().map(|w| w.as_f64()).collect()
    }

    /// Period `T_j = 2π/ω_j`.
    pub fn period(&self, j: usize) -> f64 {
        TAU / self.omega[j].as_f64()
    }

    /// States `[z; ż]` at each row of `taus`.
    pub fn states(&self, taus: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
        let s = synthesize(&self.specs, self.n(), &self.zd, &self.omega, taus)?;
        Ok((0..taus.nrows())
            .map(|r| DVector::from_iterator(2 * self.n(), s.z.row(r).iter().chain(s.zdot.row(r).iter()).map(|x| x.as_f64())))
            .collect())
    }

    /// `J(τ)` at each row of `taus`.
    pub fn jacobians(&self, taus: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let s = synthesize(&self.specs, self.n(), &self.zd, &self.omega, taus)?;
        Ok((0..taus.nrows())
            .map(|r| {
                let z: Vec<T> = s.z.row(r).iter().copied().collect();
                let v: Vec<T> = s.zdot.row(r).iter().copied().collect();
                self.lin.jacobian(self.system.as_ref(), &z, &v)
            })
            .collect())
    }

    /// Factors `exp(J_{η+1/2} h)` of the transition matrix over `steps` steps of
    /// length `h` starting at the angles `start`, with `J_{η+1/2}` the average of
    /// the endpoint Jacobians.
    pub fn step_factors(&self, start: &[f64], h: f64, steps: usize) -> Result<Vec<DMatrix<f64>>> {
        let d = self.d();
        let omega = self.omega();
        let taus = DMatrix::from_fn(steps + 1, d, |r, c| (start[c] + omega[c] * h * r as f64).rem_euclid(TAU));
        let js = self.jacobians(&taus)?;
        js.windows(2).map(|w| expm(&((&w[0] + &w[1]) * (0.5 * h)))).collect()
    }

    /// Transition matrix over `h·steps` from the angles `start`.
    pub fn transition(&self, start: &[f64], h: f64, steps: usize) -> Result<DMatrix<f64>> {
        let factors = self.step_factors(start, h, steps)?;
        let mut psi = DMatrix::identity(2 * self.n(), 2 * self.n());
        for f in &factors {
            psi = f * psi;
        }
        if psi.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalBlowup("non-finite transition matrix".into()));
        }
        Ok(psi)
    }
}

/// Monodromy matrix of a periodic (`d = 1`) solution over one period.
pub fn monodromy<T: Real>(op: &VcfOperator<T>, zd: &[T], n_m: usize) -> Result<DMatrix<f64>> {
    if op.d() != 1 {
        return Err(Error::InvalidOptions("monodromy requires a periodic (d = 1) solution".into()));
    }
    if n_m == 0 {
        return Err(Error::InvalidOptions("N_M must be positive".into()));
    }
    let ps = PerturbationSystem::new(op, zd)?;
    let t = ps.period(0);
    ps.transition(&[0.0], t / n_m as f64, n_m)
}

/// Eigenvalues of a monodromy matrix sorted by decreasing modulus.
pub fn floquet_multipliers(m: &DMatrix<f64>) -> Vec<Complex64> {
    let mut mu: Vec<Complex64> = m.complex_eigenvalues().iter().copied().collect();
    mu.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.im.total_cmp(&a.im)));
    mu
}

fn is_real(mu: &Complex64) -> bool {
    mu.im.abs() <= 1e-9 * mu.norm().max(1.0)
}

#[derive(Clone, Copy)]
struct Census {
    complex_out: usize,
    real_pos_out: usize,
    real_neg_out: usize,
    complex_max: Option<f64>,
    real_pos_max: Option<f64>,
    real_neg_max: Option<f64>,
    overall_max: f64,
}

fn census(mu: &[Complex64]) -> Census {
    let upd = |m: &mut Option<f64>, v: f64| *m = Some(m.map_or(v, |x: f64| x.max(v)));
    let mut c = Census {
        complex_out: 0,
        real_pos_out: 0,
        real_neg_out: 0,
        complex_max: None,
        real_pos_max: None,
        real_neg_max: None,
        overall_max: 0.0,
    };
    for m in mu {
        let a = m.norm();
        c.overall_max = c.overall_max.max(a);
        if !is_real(m) {
            c.complex_out += (a > 1.0) as usize;
            upd(&mut c.complex_max, a);
        } else if m.re >= 0.0 {
            c.real_pos_out += (a > 1.0) as usize;
            upd(&mut c.real_pos_max, a);
        } else {
            c.real_neg_out += (a > 1.0) as usize;
            upd(&mut c.real_neg_max, a);
        }
    }
    c
}

/// Verdict of one point and the crossing, if any, since the previous point.
#[derive(Clone, Debug, PartialEq)]
pub struct FloquetClassification {
    pub verdict: Stability,
    /// Crossing kind and the interpolated fraction of the step where it occurs.
    pub bifurcation: Option<(BifurcationKind, f64)>,
    pub max_modulus: f64,
}

/// Stable iff every `|μ| ≤ 1 + tol`. A change in the number of multipliers
/// outside the unit circle between consecutive points is tagged NS for a
/// complex pair, SN for a real multiplier through +1 and PD through −1.
pub fn classify_floquet(previous: Option<&[Complex64]>, current: &[Complex64], tol: f64) -> FloquetClassification {
    let now = census(current);
    let verdict = if current.is_empty() {
        Stability::Unknown
    } else if now.overall_max <= 1.0 + tol {
        Stability::Stable
    } else {
        Stability::Unstable
    };
    let bifurcation = previous.and_then(|prev| {
        let before = census(prev);
        let frac = |a: Option<f64>, b: Option<f64>| {
            let a = a.unwrap_or(before.overall_max) - 1.0;
            let b = b.unwrap_or(now.overall_max) - 1.0;
            if a * b < 0.0 {
                a / (a - b)
            } else {
                0.5
            }
        };
        if before.complex_out != now.complex_out {
            Some((BifurcationKind::NeimarkSacker, frac(before.complex_max, now.complex_max)))
        } else if before.real_pos_out != now.real_pos_out {
            Some((BifurcationKind::SaddleNode, frac(before.real_pos_max, now.real_pos_max)))
        } else if before.real_neg_out != now.real_neg_out {
            Some((BifurcationKind::PeriodDoubling, frac(before.real_neg_max, now.real_neg_max)))
        } else {
            None
        }
    });
    FloquetClassification {
        verdict,
        bifurcation,
        max_modulus: now.overall_max,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Floquet,
    Lyapunov,
}

/// Stability result of one branch point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityReport {
    pub kind: ReportKind,
    /// Floquet multipliers as `[re, im]` pairs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub multipliers: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exponents: Vec<f64>,
    /// Running exponent estimates, one row per stroboscopic map.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<Vec<f64>>,
    /// Whether the Lyapunov estimates settled; absent for Floquet reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settled: Option<bool>,
    pub verdict: Stability,
    pub bifurcation: Option<BifurcationKind>,
}

impl StabilityReport {
    pub fn floquet(mu: &[Complex64], class: &FloquetClassification) -> Self {
        Self {
            kind: ReportKind::Floquet,
            multipliers: mu.iter().map(|m| [m.re, m.im]).collect(),
            exponents: Vec::new(),
            history: Vec::new(),
            settled: None,
            verdict: class.verdict,
            bifurcation: class.bifurcation.map(|b| b.0),
        }
    }

    pub fn lyapunov(l: &LyapunovResult) -> Self {
        Self {
            kind: ReportKind::Lyapunov,
            multipliers: Vec::new(),
            exponents: l.exponents.clone(),
            history: l.history.clone(),
            settled: Some(l.settled),
            verdict: l.verdict,
            bifurcation: None,
        }
    }
}

/// Floquet monitor for periodic branches, tagging crossings along the way.
#[derive(Clone, Debug)]
pub struct FloquetMonitor {
    pub n_m: usize,
    pub tol: f64,
    previous: Option<Vec<Complex64>>,
    pub reports: Vec<StabilityReport>,
}

impl FloquetMonitor {
    pub fn new(n_m: usize, tol: f64) -> Self {
        Self {
            n_m,
            tol,
            previous: None,
            reports: Vec::new(),
        }
    }
}

impl<T: Real> PointMonitor<T> for FloquetMonitor {
    fn inspect(&mut self, op: &VcfOperator<T>, point: &TorusPoint<T>) -> Result<Inspection> {
        let m = monodromy(op, &point.zd, self.n_m)?;
        let mu = floquet_multipliers(&m);
        let class = classify_floquet(self.previous.as_deref(), &mu, self.tol);
        self.reports.push(StabilityReport::floquet(&mu, &class));
        self.previous = Some(mu);
        Ok(Inspection {
            stability: class.verdict,
            bifurcation: class.bifurcation,
        })
    }
}

fn inverse_iteration(m: &DMatrix<f64>, mu: Complex64) -> Result<DVector<Complex64>> {
    let n = m.nrows();
    let shift = mu + Complex64::new(1e-10 * (1.0 + mu.norm()), 1e-10);
    let a = DMatrix::from_fn(n, n, |r, c| Complex64::new(m[(r, c)], 0.0) - if r == c { shift } else { Complex64::new(0.0, 0.0) });
    let lu = a.lu();
    let mut v = DVector::from_fn(n, |i, _| Complex64::new(1.0 + 0.1 * i as f64, 0.05 * (i % 3) as f64));
    for _ in 0..4 {
        v = lu.solve(&v).ok_or(Error::Singular("eigenvector inverse iteration"))?;
        let nrm = v.norm();
        if !nrm.is_finite() || nrm == 0.0 {
            return Err(Error::NumericalBlowup("eigenvector inverse iteration".into()));
        }
        v /= Complex64::new(nrm, 0.0);
    }
    let k = (0..n).max_by(|&a, &b| v[a].norm().total_cmp(&v[b].norm())).unwrap_or(0);
    let phase = v[k] / Complex64::new(v[k].norm(), 0.0);
    Ok(v.map(|x| x / phase))
}

/// Start of a two-frequency torus branch at a Neimark-Sacker point.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct NsSeed<T: Real> {
    pub specs: Vec<BasisSpec>,
    pub point: TorusPoint<T>,
    /// Rotation angle of the critical multiplier pair `e^{±iα}`.
    pub alpha: f64,
    pub multiplier: [f64; 2],
    pub epsilon: f64,
    /// `∂Z^d/∂ε`, the torus direction the seed was displaced along.
    #[serde(default)]
    pub direction: Vec<T>,
}

/// Builds `x(τ₁, τ₂) = x_p(τ₁) + ε Re{e^{iτ₂} υ(τ₁)}` with
/// `υ(τ₁) = e^{−iατ₁/2π} M(τ₁, 0) υ(0)` and projects it onto `specs2`.
/// The eigenvector `υ(0)` is scaled to unit norm. Returns `ω = [ω₁, α/T₁]`,
/// for which the sign of the `sin τ₂` term makes `τ₂` advance with the flow.
pub fn ns_torus_init<T: Real>(
    op: &VcfOperator<T>,
    zd: &[T],
    specs2: &[BasisSpec],
    n_m: usize,
    epsilon: f64,
    tol: f64,
) -> Result<NsSeed<T>> {
    if op.d() != 1 {
        return Err(Error::InvalidOptions("NS initialization requires a periodic (d = 1) solution".into()));
    }
    if specs2.len() != 2 {
        return Err(Error::InvalidOptions("NS initialization targets a d = 2 torus".into()));
    }
    if n_m == 0 {
        return Err(Error::InvalidOptions("N_M must be positive".into()));
    }
    let n = op.n();
    let ps = PerturbationSystem::new(op, zd)?;
    let w1 = ps.omega()[0];
    let t1 = ps.period(0);
    let h = t1 / n_m as f64;
    let factors = ps.step_factors(&[0.0], h, n_m)?;
    let mut partial = Vec::with_capacity(n_m + 1);
    partial.push(DMatrix::<f64>::identity(2 * n, 2 * n));
    for f in &factors {
        let next = f * partial.last().unwrap();
        partial.push(next);
    }
    let mu = floquet_multipliers(&partial[n_m]);
    let crit = mu
        .iter()
        .filter(|m| !is_real(m) && m.im > 0.0)
        .min_by(|a, b| (a.norm() - 1.0).abs().total_cmp(&(b.norm() - 1.0).abs()))
        .copied()
        .ok_or_else(|| Error::NotAnNsPoint("no complex multiplier pair".into()))?;
    if (crit.norm() - 1.0).abs() > tol {
        return Err(Error::NotAnNsPoint(format!(
            "closest complex pair has modulus {:.6}, outside 1 ± {tol}",
            crit.norm()
        )));
    }
    let alpha = crit.arg();
    let v0 = inverse_iteration(&partial[n_m], crit)?;

    let grid = sgrid(specs2);
    let s1 = specs2[0].s();
    let tau1: Vec<f64> = (0..s1).map(|j| grid[(j, 0)]).collect();
    let taus1 = DMatrix::from_column_slice(s1, 1, &tau1);
    let xp = synthesize(op.specs(), n, zd, op.omega(), &taus1)?;
    let v0c = DVector::from_iterator(2 * n, v0.iter().copied());
    let mut ups = Vec::with_capacity(s1);
    for &t in &tau1 {
        let time = t / w1;
        let k = ((time / h).floor() as usize).min(n_m);
        let mut m = partial[k].clone();
        let rem = time - k as f64 * h;
        if rem > 1e-14 * t1 {
            let js = ps.jacobians(&DMatrix::from_row_slice(2, 1, &[(k as f64 * h * w1) % TAU, t]))?;
            m = expm(&((&js[0] + &js[1]) * (0.5 * rem)))? * m;
        }
        let mc = m.map(|x| Complex64::new(x, 0.0));
        let rot = Complex64::from_polar(1.0, -alpha * t / TAU);
        ups.push((mc * &v0c) * rot);
    }

    let aus = AusWorkspace::<T>::from_specs(n, specs2)?;
    let g = aus.grid_count();
    let mut f0 = vec![T::zero(); g * n];
    let mut df = vec![T::zero(); g * n];
    for gi in 0..g {
        let j1 = gi % s1;
        let (s, c) = grid[(gi, 1)].sin_cos();
        for l in 0..n {
            let u = ups[j1][l];
            let dir = c * u.re - s * u.im;
            f0[gi + g * l] = T::lit(xp.z[(j1, l)].as_f64() + epsilon * dir);
            df[gi + g * l] = T::lit(dir);
        }
    }
    let zd2 = aus.stu1(&f0)?;
    let direction = aus.stu1(&df)?;
    let omega = vec![op.omega()[0], T::lit(alpha / t1)];
    Ok(NsSeed {
        specs: specs2.to_vec(),
        point: TorusPoint::new(zd2, omega, op.omega()[0]),
        alpha,
        multiplier: [crit.re, crit.im],
        epsilon,
        direction,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovOptions {
    /// Index of the stroboscopic frequency, `Δt = T_j`.
    pub j: usize,
    /// Section samples per remaining dimension.
    pub section_samples: usize,
    /// Number of stroboscopic maps.
    pub n_l: usize,
    /// Exponential factors per map.
    pub n_m: usize,
    /// Number of exponents; `None` computes all `2n`.
    pub k: Option<usize>,
    /// Worker threads for the section transition matrices; 0 picks automatically.
    pub threads: usize,
}

impl Default for LyapunovOptions {
    fn default() -> Self {
        Self {
            j: 0,
            section_samples: 64,
            n_l: 10_000,
            n_m: 256,
            k: None,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LyapunovResult {
    /// Exponents in QR order, decreasing once the estimates have converged.
    pub exponents: Vec<f64>,
    /// Running estimates after each map.
    pub history: Vec<Vec<f64>>,
    /// Largest spread of any running estimate over the final fifth of the run.
    pub spread: f64,
    pub settled: bool,
    pub verdict: Stability,
    /// Worst mismatch between summed log growth and `log|det R|` over all steps.
    pub volume_defect: f64,
}

fn section_grid(d: usize, j: usize, y: usize) -> DMatrix<f64> {
    let count = y.pow((d - 1) as u32);
    let mut out = DMatrix::zeros(count, d);
    for q in 0..count {
        let mut rest = q;
        for c in (0..d).filter(|&c| c != j) {
            out[(q, c)] = TAU * (rest % y) as f64 / y as f64;
            rest /= y;
        }
    }
    out
}

/// Lyapunov exponents of a torus from stroboscopic maps over `T_j`, with the
/// transition matrices interpolated over the start section.
pub fn lyapunov_exponents<T: Real>(op: &VcfOperator<T>, zd: &[T], opts: &LyapunovOptions) -> Result<LyapunovResult> {
    let d = op.d();
    if d < 2 {
        return Err(Error::InvalidOptions("Lyapunov exponents require a torus with d ≥ 2".into()));
    }
    if opts.j >= d || opts.section_samples == 0 || opts.n_l == 0 || opts.n_m == 0 {
        return Err(Error::InvalidOptions("invalid Lyapunov options".into()));
    }
    if d > 2 {
        log::warn!("Lyapunov exponents for d > 2 are experimental");
    }
    let ps = PerturbationSystem::new(op, zd)?;
    let dim = 2 * ps.n();
    let k = opts.k.unwrap_or(dim);
    if k == 0 || k > dim {
        return Err(Error::InvalidOptions(format!("k must lie in 1..={dim}")));
    }
    let y = opts.section_samples;
    let omega = ps.omega();
    let dt = ps.period(opts.j);
    let h = dt / opts.n_m as f64;
    let section = section_grid(d, opts.j, y);
    let count = section.nrows();

    let threads = if opts.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        opts.threads
    }
    .clamp(1, count);
    let chunk = count.div_ceil(threads);
    let mut psis: Vec<DMatrix<f64>> = Vec::with_capacity(count);
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let ps = &ps;
                let section = &section;
                scope.spawn(move || -> Result<Vec<DMatrix<f64>>> {
                    (t * chunk..((t + 1) * chunk).min(count))
                        .map(|q| {
                            let start: Vec<f64> = section.row(q).iter().copied().collect();
                            ps.transition(&start, h, opts.n_m)
                        })
                        .collect()
                })
            })
            .collect();
        for hd in handles {
            psis.extend(hd.join().expect("section worker panicked")?);
        }
        Ok(())
    })?;

    let others: Vec<usize> = (0..d).filter(|&c| c != opts.j).collect();
    // A dense start keeps invariant coordinate subspaces from hiding faster directions.
    let start = DMatrix::from_fn(dim, k, |r, c| ((1 + r + dim * c) as f64 * 0.618_034).sin());
    let mut q = start.qr().q();
    let mut sums = vec![0.0; k];
    let mut history = Vec::with_capacity(opts.n_l);
    let mut volume_defect: f64 = 0.0;
    for i in 0..opts.n_l {
        let rows: Vec<Vec<f64>> = others
            .iter()
            .map(|&c| trig_interp_row(y, (i as f64 * omega[c] * dt).rem_euclid(TAU)).0)
            .collect();
        let mut psi = DMatrix::<f64>::zeros(dim, dim);
        for (idx, p) in psis.iter().enumerate() {
            let mut w = 1.0;
            let mut rest = idx;
            for r in &rows {
                w *= r[rest % y];
                rest /= y;
            }
            psi.zip_apply(p, |a, b| *a += w * b);
        }
        let qr = (psi * &q).qr();
        let (mut qn, mut r) = qr.unpack();
        for m in 0..k {
            if r[(m, m)] < 0.0 {
                qn.column_mut(m).neg_mut();
                r.row_mut(m).neg_mut();
            }
        }
        let mut step_sum = 0.0;
        for m in 0..k {
            let g = r[(m, m)].ln();
            if !g.is_finite() {
                return Err(Error::NumericalBlowup(format!("non-finite growth at map {}", i + 1)));
            }
            sums[m] += g;
            step_sum += g;
        }
        let det = r.view((0, 0), (k, k)).determinant().abs().ln();
        volume_defect = volume_defect.max((det - step_sum).abs() / (1.0 + det.abs()));
        q = qn;
        let elapsed = (i + 1) as f64 * dt;
        history.push(sums.iter().map(|s| s / elapsed).collect::<Vec<_>>());
    }
    let exponents = history.last().cloned().unwrap_or_default();
    let tail = (opts.n_l / 5).max(1);
    let spread = (0..k)
        .map(|m| {
            let vals = history[opts.n_l - tail..].iter().map(|h| h[m]);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi - lo
        })
        .fold(0.0, f64::max);
    let settled = spread <= LYAPUNOV_SETTLE_TOL;
    let verdict = if !settled {
        Stability::Unknown
    } else if exponents[0] <= LYAPUNOV_STABLE_TOL {
        Stability::Stable
    } else {
        Stability::Unstable
    };
    Ok(LyapunovResult {
        exponents,
        history,
        spread,
        settled,
        verdict,
        volume_defect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuation::{solve_at_parameter, ContinuationOptions};
    use crate::models::{duffing_vdp, LinearSystem};

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    fn taylor_expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let s = 8;
        let a = a / 2f64.powi(s);
        let n = a.nrows();
        let mut term = DMatrix::identity(n, n);
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * &a / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn expm_matches_closed_forms() {
        for &t in &[1e-3f64, 0.1, 0.7, 2.0, 30.0] {
            let a = DMatrix::from_row_slice(2, 2, &[0.0, t, -t, 0.0]);
            let e = DMatrix::from_row_slice(2, 2, &[t.cos(), t.sin(), -t.sin(), t.cos()]);
            assert!(rel(&expm(&a).unwrap(), &e) < 1e-13, "rotation {t}");
        }
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let e = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.5, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(rel(&expm(&a).unwrap(), &e) < 1e-15);
        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![-5.0, 0.3, 12.0]));
        let e = DMatrix::from_diagonal(&DVector::from_vec(vec![(-5f64).exp(), 0.3f64.exp(), 12f64.exp()]));
        assert!(rel(&expm(&diag).unwrap(), &e) < 1e-13);
    }

    #[test]
    fn expm_matches_taylor_on_every_pade_branch() {
        for &scale in &[0.005, 0.1, 0.5, 1.5, 4.0, 40.0] {
            let a = DMatrix::from_fn(5, 5, |r, c| ((r * 5 + c) as f64 * 0.77).sin() * scale / 5.0);
            assert!(rel(&expm(&a).unwrap(), &taylor_expm(&a)) < 1e-12, "scale {scale}");
        }
    }

    fn duffing() -> Arc<dyn SecondOrderSystem<f64>> {
        Arc::new(duffing_vdp::<f64>(0.2, 0.5, 2.0, &[2.0]).unwrap())
    }

    #[test]
    fn state_jacobian_matches_finite_differences() {
        let sys = duffing_vdp::<f64>(0.2, 0.5, 2.0, &[2.0]).unwrap();
        for x in [[0.3, -0.7], [1.5, 0.4], [-2.0, 3.0]] {
            let j = state_jacobian(&sys, &x[..1], &x[1..]).unwrap();
            let (tau, om) = ([0.4], [1.3]);
            for c in 0..2 {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[c] += h;
                xm[c] -= h;
                let fp = vector_field(&sys, &xp, &tau, &om, 1.0).unwrap();
                let fm = vector_field(&sys, &xm, &tau, &om, 1.0).unwrap();
                for r in 0..2 {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    assert!((fd - j[(r, c)]).abs() <= 1e-5 * (1.0 + fd.abs()), "{x:?} ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn undamped_oscillator_monodromy_is_identity() {
        let sys: Arc<dyn SecondOrderSystem<f64>> = Arc::new(LinearSystem::oscillator(1.7, 0.0, None));
        let op = VcfOperator::assemble(sys, &[BasisSpec::hb(3, 16)], &[1.7]).unwrap();
        let m = monodromy(&op, &vec![0.0; 7], 256).unwrap();
        assert!((m - DMatrix::identity(2, 2)).abs().max() < 1e-8);
    }

    #[test]
    fn damped_oscillator_multipliers_match_eigenvalues() {
        let (w0, zeta, w) = (1.3, 0.05, 0.9);
        let sys: Arc<dyn SecondOrderSystem<f64>> = Arc::new(LinearSystem::oscillator(w0, zeta, None));
        let op = VcfOperator::assemble(sys, &[BasisSpec::hb(3, 16)], &[w]).unwrap();
        let mu = floquet_multipliers(&monodromy(&op, &vec![0.0; 7], 256).unwrap());
        let t = TAU / w;
        let lam = Complex64::new(-zeta * w0, w0 * (1.0 - zeta * zeta).sqrt());
        for expect in [(lam * t).exp(), (lam.conj() * t).exp()] {
            let best = mu.iter().map(|m| (m - expect).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-8, "{mu:?} vs {expect}");
        }
    }

    fn duffing_periodic(w: f64) -> (VcfOperator<f64>, Vec<f64>) {
        let op = VcfOperator::assemble(duffing(), &[BasisSpec::hb(9, 64)], &[w]).unwrap();
        let init = TorusPoint::new(vec![0.0; op.coeff_len()], vec![w], w);
        let (pt, _) = solve_at_parameter(&op, &init, &ContinuationOptions::default()).unwrap();
        (op, pt.zd)
    }

    #[test]
    fn monodromy_converges_at_second_order() {
        let (op, zd) = duffing_periodic(1.5);
        let reference = monodromy(&op, &zd, 4096).unwrap();
        let e1 = rel(&monodromy(&op, &zd, 64).unwrap(), &reference);
        let e2 = rel(&monodromy(&op, &zd, 128).unwrap(), &reference);
        let ratio = e1 / e2;
        assert!((3.2..5.0).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn liouville_determinant() {
        let (op, zd) = duffing_periodic(2.4);
        let ps = PerturbationSystem::new(&op, &zd).unwrap();
        let m = monodromy(&op, &zd, 512).unwrap();
        let g = 2048;
        let taus = DMatrix::from_fn(g, 1, |r, _| TAU * r as f64 / g as f64);
        let trace: f64 = ps.jacobians(&taus).unwrap().iter().map(|j| j.trace()).sum::<f64>() / g as f64;
        let expect = (trace * ps.period(0)).exp();
        assert!((m.determinant() - expect).abs() < 1e-6 * expect, "{} vs {expect}", m.determinant());
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn floquet_classification_examples() {
        let contracting = [c(0.9, 0.0), c(0.0, 0.9), c(0.0, -0.9)];
        let r = classify_floquet(None, &contracting, FLOQUET_TOL);
        assert_eq!(r.verdict, Stability::Stable);
        assert_eq!(r.bifurcation, None);

        let before = [c(0.7, 0.6), c(0.7, -0.6)];
        let after = [c(0.8, 0.7), c(0.8, -0.7)];
        let r = classify_floquet(Some(&before), &after, FLOQUET_TOL);
        assert_eq!(r.verdict, Stability::Unstable);
        let (kind, frac) = r.bifurcation.unwrap();
        assert_eq!(kind, BifurcationKind::NeimarkSacker);
        assert!(frac > 0.0 && frac < 1.0);

        let r = classify_floquet(Some(&[c(0.99, 0.0), c(0.2, 0.0)]), &[c(1.01, 0.0), c(0.2, 0.0)], FLOQUET_TOL);
        let (kind, frac) = r.bifurcation.unwrap();
        assert_eq!(kind, BifurcationKind::SaddleNode);
        assert!((frac - 0.5).abs() < 1e-12);

        let r = classify_floquet(Some(&[c(-0.98, 0.0)]), &[c(-1.02, 0.0)], FLOQUET_TOL);
        assert_eq!(r.bifurcation.unwrap().0, BifurcationKind::PeriodDoubling);

        let r = classify_floquet(None, &[c(1.0 + 1e-9, 0.0)], FLOQUET_TOL);
        assert_eq!(r.verdict, Stability::Stable);
    }

    #[test]
    fn ns_init_rejects_points_without_unit_pair() {
        let (op, zd) = duffing_periodic(1.5);
        let err = ns_torus_init(&op, &zd, &[BasisSpec::hb(9, 64), BasisSpec::hb(3, 16)], 128, 0.1, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NotAnNsPoint(_)), "{err}");
    }

    /// Undamped two-DOF chain whose monodromy has unit-modulus complex pairs.
    fn conservative_chain() -> Arc<dyn SecondOrderSystem<f64>> {
        let m = DMatrix::identity(2, 2);
        let k = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        let f = DMatrix::from_row_slice(2, 1, &[0.4, 0.0]);
        Arc::new(LinearSystem::new(m, DMatrix::zeros(2, 2), k, f).unwrap())
    }

    #[test]
    fn ns_init_transports_eigenvector_consistently() {
        let w = 0.8;
        let op = VcfOperator::assemble(conservative_chain(), &[BasisSpec::hb(4, 16)], &[w]).unwrap();
        let init = TorusPoint::new(vec![0.0; op.coeff_len()], vec![w], w);
        let (pt, _) = solve_at_parameter(&op, &init, &ContinuationOptions::default()).unwrap();
        let specs2 = [BasisSpec::hb(4, 16), BasisSpec::hb(1, 8)];
        let seed = ns_torus_init(&op, &pt.zd, &specs2, 256, 0.1, 1e-6).unwrap();
        assert!(seed.alpha > 0.0 && seed.alpha < std::f64::consts::PI);
        let w2 = seed.point.omega[1];
        assert!((w2 - seed.alpha / (TAU / w)).abs() < 1e-12);
        // The linear variation υ is itself a free motion, so the seeded torus
        // solves the d = 2 equations when α/T₁ matches a natural frequency.
        let natural = [1.0f64, 3f64.sqrt()];
        let hits = natural.iter().any(|&wn| {
            let a = (wn * TAU / w).rem_euclid(TAU);
            let a = if a > std::f64::consts::PI { TAU - a } else { a };
            (a - seed.alpha).abs() < 1e-8
        });
        assert!(hits, "alpha {} not a natural-frequency rotation", seed.alpha);
        let op2 = VcfOperator::assemble(conservative_chain(), &specs2, &seed.point.omega).unwrap();
        let r = op2.residual(&seed.point.zd).unwrap();
        assert!(r.norm() < 1e-7, "seed residual {}", r.norm());
    }

    #[test]
    fn ns_init_with_zero_size_embeds_periodic_solution() {
        let w = 0.8;
        let op = VcfOperator::assemble(conservative_chain(), &[BasisSpec::hb(4, 16)], &[w]).unwrap();
        let init = TorusPoint::new(vec![0.0; op.coeff_len()], vec![w], w);
        let (pt, _) = solve_at_parameter(&op, &init, &ContinuationOptions::default()).unwrap();
        let specs2 = [BasisSpec::hb(4, 16), BasisSpec::hb(2, 8)];
        let seed = ns_torus_init(&op, &pt.zd, &specs2, 128, 0.0, 1e-6).unwrap();
        let u2 = specs2[1].u();
        for l in 0..2 {
            for k1 in 0..9 {
                for k2 in 0..u2 {
                    let v = seed.point.zd[k2 + u2 * (k1 + 9 * l)];
                    let expect = if k2 == 0 { pt.zd[k1 + 9 * l] } else { 0.0 };
                    assert!((v - expect).abs() < 1e-12);
                }
            }
        }
        let op2 = VcfOperator::assemble(conservative_chain(), &specs2, &seed.point.omega).unwrap();
        assert!(op2.residual(&seed.point.zd).unwrap().norm() < 1e-8);
    }

    #[test]
    fn lyapunov_of_linear_system_matches_eigenvalues() {
        let m = DMatrix::identity(2, 2);
        let dmp = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.4]);
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]);
        let sys: Arc<dyn SecondOrderSystem<f64>> = Arc::new(LinearSystem::new(m, dmp, k, f).unwrap());
        let specs = [BasisSpec::hb(2, 8), BasisSpec::hb(2, 8)];
        let omega = [1.3, 1.3 / 5f64.sqrt()];
        let op = VcfOperator::assemble(sys, &specs, &omega).unwrap();
        let init = TorusPoint::new(vec![0.0; op.coeff_len()], omega.to_vec(), omega[0]);
        let opts = ContinuationOptions {
            fixed_frequencies: vec![1],
            ..Default::default()
        };
        let (pt, _) = solve_at_parameter(&op, &init, &opts).unwrap();
        let lo = LyapunovOptions {
            section_samples: 8,
            n_l: 2000,
            n_m: 32,
            ..Default::default()
        };
        let res = lyapunov_exponents(&op, &pt.zd, &lo).unwrap();
        let expect = [-0.05, -0.05, -0.2, -0.2];
        for (s, e) in res.exponents.iter().zip(expect) {
            assert!((s - e).abs() < 1e-3, "{:?}", res.exponents);
        }
        assert!(res.exponents.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        assert!(res.volume_defect < 1e-10);
        assert_eq!(res.verdict, Stability::Stable);
    }

    #[test]
    fn lyapunov_agrees_with_floquet_on_embedded_orbit() {
        let w = 2.4;
        let (op1, zd1) = duffing_periodic(w);
        let mu = floquet_multipliers(&monodromy(&op1, &zd1, 256).unwrap());
        let t = TAU / w;
        let specs2 = [BasisSpec::hb(9, 64), BasisSpec::hb(1, 4)];
        let mut seed = ns_torus_embed(&op1, &zd1, &specs2);
        seed.omega[1] = w / 5f64.sqrt();
        let op2 = VcfOperator::assemble(duffing(), &specs2, &seed.omega).unwrap();
        let lo = LyapunovOptions {
            section_samples: 4,
            n_l: 300,
            n_m: 256,
            ..Default::default()
        };
        let res = lyapunov_exponents(&op2, &seed.zd, &lo).unwrap();
        let expect = mu[0].norm().ln() / t;
        assert!((res.exponents[0] - expect).abs() < 1e-2, "{} vs {expect}", res.exponents[0]);
        assert!(res.settled);
    }

    fn ns_torus_embed(op: &VcfOperator<f64>, zd: &[f64], specs2: &[BasisSpec]) -> TorusPoint<f64> {
        let (u1, u2) = (specs2[0].u(), specs2[1].u());
        assert_eq!(u1, op.specs()[0].u());
        let mut out = vec![0.0; op.n() * u1 * u2];
        for l in 0..op.n() {
            for k in 0..u1 {
                out[u2 * (k + u1 * l)] = zd[k + u1 * l];
            }
        }
        TorusPoint::new(out, vec![op.omega()[0], 1.0], op.omega()[0])
    }

    #[test]
    fn lyapunov_rejects_periodic_input() {
        let (op, zd) = duffing_periodic(1.5);
        assert!(lyapunov_exponents(&op, &zd, &LyapunovOptions::default()).is_err());
    }

    #[test]
    fn stability_report_serializes() {
        let mu = [c(0.5, 0.1), c(0.5, -0.1)];
        let class = classify_floquet(None, &mu, FLOQUET_TOL);
        let rep = StabilityReport::floquet(&mu, &class);
        let s = serde_json::to_string(&rep).unwrap();
        let back: StabilityReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back.multipliers, rep.multipliers);
        assert_eq!(back.verdict, Stability::Stable);
    }
}
