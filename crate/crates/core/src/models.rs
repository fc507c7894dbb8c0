//! Second-order systems `M⁰Z̈ + D⁰Ż + K⁰Z + Θ⁰[F⁰(Z, Ż) − E⁰(τ)] = 0` and the
//! benchmark models built on that form.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::gauss_legendre;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// A second-order system with pointwise nonlinear force and periodic excitation.
///
/// Jacobians are written column-major into `n × n` slices. Excitation phases
/// `tau` hold one angle per torus dimension; only the first
/// [`excitation_count`](Self::excitation_count) are used.
pub trait SecondOrderSystem<T: Real>: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn n(&self) -> usize;
    fn excitation_count(&self) -> usize;
    fn mass(&self) -> &DMatrix<T>;
    fn damping(&self) -> &DMatrix<T>;
    fn stiffness(&self) -> &DMatrix<T>;
    fn theta(&self) -> &DMatrix<T>;

    /// True when `F⁰ ≡ 0`, which lets callers skip the nonlinear pipelines.
    fn is_linear(&self) -> bool {
        false
    }

    fn force(&self, z: &[T], zdot: &[T], out: &mut [T]);
    fn force_jacobians(&self, z: &[T], zdot: &[T], dz: &mut [T], dzdot: &mut [T]);
    fn excitation(&self, tau: &[T], omega: &[T], out: &mut [T]);

    /// Writes `∂E⁰/∂ωᵢ` and returns true, or returns false when the excitation
    /// does not depend on `ωᵢ`.
    fn excitation_omega_derivative(&self, _tau: &[T], _omega: &[T], _i: usize, _out: &mut [T]) -> bool {
        false
    }

    /// Weights of the scalar displacement reported as the amplitude.
    fn observation(&self) -> DVector<T>;
}

fn check_mass<T: Real>(m: &DMatrix<T>) -> Result<()> {
    if m.clone().lu().try_inverse().is_none() {
        return Err(Error::InvalidModel("mass matrix is singular".into()));
    }
    Ok(())
}

/// Linear system with `F⁰ ≡ 0`, `Θ⁰ = I` and cosine excitation
/// `E⁰ = Σₖ f_k cos τₖ` with one column of `forcing` per excitation phase.
#[derive(Clone, Debug)]
pub struct LinearSystem<T: Real> {
    m: DMatrix<T>,
    d: DMatrix<T>,
    k: DMatrix<T>,
    theta: DMatrix<T>,
    forcing: DMatrix<T>,
}

impl<T: Real> LinearSystem<T> {
    pub fn new(m: DMatrix<T>, d: DMatrix<T>, k: DMatrix<T>, forcing: DMatrix<T>) -> Result<Self> {
        let n = m.nrows();
        if [m.shape(), d.shape(), k.shape()].iter().any(|s| *s != (n, n)) || forcing.nrows() != n {
            return Err(Error::InvalidModel("inconsistent matrix sizes".into()));
        }
        check_mass(&m)?;
        Ok(Self {
            theta: DMatrix::identity(n, n),
            m,
            d,
            k,
            forcing,
        })
    }

    /// `ẍ + 2ζω₀ẋ + ω₀²x = f cos τ₁` (no forcing when `f` is `None`).
    pub fn oscillator(omega0: T, zeta: T, f: Option<T>) -> Self {
        let e = usize::from(f.is_some());
        Self::new(
            DMatrix::from_element(1, 1, T::one()),
            DMatrix::from_element(1, 1, T::lit(2.0) * zeta * omega0),
            DMatrix::from_element(1, 1, omega0 * omega0),
            DMatrix::from_element(1, e, f.unwrap_or(T::zero())),
        )
        .expect("scalar oscillator is well formed")
    }
}

impl<T: Real> SecondOrderSystem<T> for LinearSystem<T> {
    fn name(&self) -> &str {
        "linear"
    }
    fn n(&self) -> usize {
        self.m.nrows()
    }
    fn excitation_count(&self) -> usize {
        self.forcing.ncols()
    }
    fn mass(&self) -> &DMatrix<T> {
        &self.m
    }
    fn damping(&self) -> &DMatrix<T> {
        &self.d
    }
    fn stiffness(&self) -> &DMatrix<T> {
        &self.k
    }
    fn theta(&self) -> &DMatrix<T> {
        &self.theta
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn force(&self, _z: &[T], _zdot: &[T], out: &mut [T]) {
        out.fill(T::zero());
    }
    fn force_jacobians(&self, _z: &[T], _zdot: &[T], dz: &mut [T], dzdot: &mut [T]) {
        dz.fill(T::zero());
        dzdot.fill(T::zero());
    }
    fn excitation(&self, tau: &[T], _omega: &[T], out: &mut [T]) {
        out.fill(T::zero());
        for k in 0..self.forcing.ncols() {
            let c = tau[k].cos();
            for (i, o) in out.iter_mut().enumerate() {
                *o += self.forcing[(i, k)] * c;
            }
        }
    }
    fn observation(&self) -> DVector<T> {
        let mut v = DVector::zeros(self.n());
        v[0] = T::one();
        v
    }
}

/// Parameters of the forced Duffing–van der Pol oscillator
/// `ẍ − μ(1 − x²)ẋ + ω₀²x + αx³ = Σ fᵢ cos(ωᵢt)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuffingParams {
    pub mu: f64,
    pub alpha: f64,
    pub omega0: f64,
    pub forcing: Vec<f64>,
}

impl Default for DuffingParams {
    fn default() -> Self {
        Self {
            mu: 0.2,
            alpha: 0.5,
            omega0: 2.0,
            forcing: vec![2.0, 1.0, 0.5],
        }
    }
}

/// Single-DOF Duffing–van der Pol oscillator. The linear part `−μẋ + ω₀²x`
/// lives in `D⁰`, `K⁰`; `F⁰ = μx²ẋ + αx³`.
#[derive(Clone, Debug)]
pub struct DuffingVdp<T: Real> {
    mu: T,
    alpha: T,
    forcing: Vec<T>,
    m: DMatrix<T>,
    d: DMatrix<T>,
    k: DMatrix<T>,
    theta: DMatrix<T>,
}

impl<T: Real> DuffingVdp<T> {
    pub fn new(params: &DuffingParams) -> Result<Self> {
        if params.forcing.is_empty() || params.forcing.len() > 3 {
            return Err(Error::InvalidModel(format!(
                "Duffing–van der Pol supports one to three forcing tones, got {}",
                params.forcing.len()
            )));
        }
        let one = |v: f64| DMatrix::from_element(1, 1, T::lit(v));
        Ok(Self {
            mu: T::lit(params.mu),
            alpha: T::lit(params.alpha),
            forcing: params.forcing.iter().map(|&f| T::lit(f)).collect(),
            m: one(1.0),
            d: one(-params.mu),
            k: one(params.omega0 * params.omega0),
            theta: one(1.0),
        })
    }
}

/// Duffing–van der Pol oscillator with `d` forcing tones.
pub fn duffing_vdp<T: Real>(mu: f64, alpha: f64, omega0: f64, forcing: &[f64]) -> Result<DuffingVdp<T>> {
    DuffingVdp::new(&DuffingParams {
        mu,
        alpha,
        omega0,
        forcing: forcing.to_vec(),
    })
}

impl<T: Real> SecondOrderSystem<T> for DuffingVdp<T> {
    fn name(&self) -> &str {
        "duffing_vdp"
    }
    fn n(&self) -> usize {
        1
    }
    fn excitation_count(&self) -> usize {
        self.forcing.len()
    }
    fn mass(&self) -> &DMatrix<T> {
        &self.m
    }
    fn damping(&self) -> &DMatrix<T> {
        &self.d
    }
    fn stiffness(&self) -> &DMatrix<T> {
        &self.k
    }
    fn theta(&self) -> &DMatrix<T> {
        &self.theta
    }
    fn force(&self, z: &[T], zdot: &[T], out: &mut [T]) {
        let (x, v) = (z[0], zdot[0]);
        out[0] = self.mu * x * x * v + self.alpha * x * x * x;
    }
    fn force_jacobians(&self, z: &[T], zdot: &[T], dz: &mut [T], dzdot: &mut [T]) {
        let (x, v) = (z[0], zdot[0]);
        dz[0] = T::lit(2.0) * self.mu * x * v + T::lit(3.0) * self.alpha * x * x;
        dzdot[0] = self.mu * x * x;
    }
    fn excitation(&self, tau: &[T], _omega: &[T], out: &mut [T]) {
        out[0] = self
            .forcing
            .iter()
            .zip(tau)
            .fold(T::zero(), |acc, (&f, &t)| acc + f * t.cos());
    }
    fn observation(&self) -> DVector<T> {
        DVector::from_element(1, T::one())
    }
}

/// Normalization of the first linear mode used to shape the beam forcing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeNormalization {
    /// Unit tip displacement.
    #[default]
    Tip,
    /// Unit modal mass `φᵀMφ = 1`.
    Mass,
}

/// Cantilever beam with a cubic spring at the free end. Units are kg, mm and s
/// with every parameter taken as a raw number in that system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamParams {
    pub elements: usize,
    pub e_amp: f64,
    pub length: f64,
    pub height: f64,
    pub width: f64,
    pub density: f64,
    pub youngs: f64,
    pub k1: f64,
    pub knl: f64,
    pub rayleigh_alpha: f64,
    pub rayleigh_beta: f64,
    pub normalization: ModeNormalization,
}

impl Default for BeamParams {
    fn default() -> Self {
        Self {
            elements: 8,
            e_amp: 0.002,
            length: 2700.0,
            height: 10.0,
            width: 10.0,
            density: 1780e-9,
            youngs: 45e6,
            k1: 27.0,
            knl: 60.0,
            rayleigh_alpha: 1.25e-4,
            rayleigh_beta: 2.5e-5,
            normalization: ModeNormalization::Tip,
        }
    }
}

/// Euler–Bernoulli cantilever discretized with cubic Hermite elements.
#[derive(Clone, Debug)]
pub struct Beam<T: Real> {
    params: BeamParams,
    tip: usize,
    knl: T,
    m: DMatrix<T>,
    d: DMatrix<T>,
    k: DMatrix<T>,
    theta: DMatrix<T>,
    f: DVector<T>,
    omega_l1: f64,
}

/// Mass, bending stiffness (without the spring) for the free DOFs.
fn beam_matrices(p: &BeamParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let ne = p.elements;
    let le = p.length / ne as f64;
    let area = p.width * p.height;
    let inertia = p.width * p.height.powi(3) / 12.0;
    let mc = p.density * area * le / 420.0;
    let kc = p.youngs * inertia / le.powi(3);
    let l = le;
    let me = DMatrix::from_row_slice(
        4,
        4,
        &[
            156.0, 22.0 * l, 54.0, -13.0 * l, //
            22.0 * l, 4.0 * l * l, 13.0 * l, -3.0 * l * l, //
            54.0, 13.0 * l, 156.0, -22.0 * l, //
            -13.0 * l, -3.0 * l * l, -22.0 * l, 4.0 * l * l,
        ],
    ) * mc;
    let ke = DMatrix::from_row_slice(
        4,
        4,
        &[
            12.0, 6.0 * l, -12.0, 6.0 * l, //
            6.0 * l, 4.0 * l * l, -6.0 * l, 2.0 * l * l, //
            -12.0, -6.0 * l, 12.0, -6.0 * l, //
            6.0 * l, 2.0 * l * l, -6.0 * l, 4.0 * l * l,
        ],
    ) * kc;
    let full = 2 * (ne + 1);
    let mut mg = DMatrix::zeros(full, full);
    let mut kg = DMatrix::zeros(full, full);
    for e in 0..ne {
        let base = 2 * e;
        for a in 0..4 {
            for b in 0..4 {
                mg[(base + a, base + b)] += me[(a, b)];
                kg[(base + a, base + b)] += ke[(a, b)];
            }
        }
    }
    let n = 2 * ne;
    (
        mg.view((2, 2), (n, n)).into_owned(),
        kg.view((2, 2), (n, n)).into_owned(),
    )
}

/// Undamped natural frequencies (ascending) and mass-normalized mode shapes of
/// `K φ = ω² M φ` for symmetric positive definite `M`.
pub fn generalized_modes(m: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidModel("mass matrix is not positive definite".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("Cholesky factor"))?;
    let a = &linv * k * linv.transpose();
    let a = (&a + a.transpose()) * 0.5;
    let eig = a.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let n = m.nrows();
    let mut freqs = Vec::with_capacity(n);
    let mut modes = DMatrix::zeros(n, n);
    let back = linv.transpose();
    for (c, &i) in order.iter().enumerate() {
        freqs.push(eig.eigenvalues[i].max(0.0).sqrt());
        modes.set_column(c, &(&back * eig.eigenvectors.column(i)));
    }
    Ok((freqs, modes))
}

impl<T: Real> Beam<T> {
    pub fn new(params: &BeamParams) -> Result<Self> {
        if params.elements == 0 {
            return Err(Error::InvalidModel("beam needs at least one element".into()));
        }
        let (m, kb) = beam_matrices(params);
        let n = m.nrows();
        let tip = n - 2;
        let mut k = kb.clone();
        k[(tip, tip)] += params.k1;
        let d = &m * params.rayleigh_alpha + &kb * params.rayleigh_beta;
        let (freqs, modes) = generalized_modes(&m, &k)?;
        let mut phi = modes.column(0).into_owned();
        match params.normalization {
            ModeNormalization::Tip => phi /= phi[tip],
            ModeNormalization::Mass => {
                if phi[tip] < 0.0 {
                    phi = -phi;
                }
            }
        }
        let omega_l1 = freqs[0];
        let f = &m * phi * (omega_l1 * omega_l1);
        let cast = |x: DMatrix<f64>| x.map(T::lit);
        Ok(Self {
            params: params.clone(),
            tip,
            knl: T::lit(params.knl),
            theta: DMatrix::identity(n, n),
            m: cast(m),
            d: cast(d),
            k: cast(k),
            f: f.map(T::lit),
            omega_l1,
        })
    }

    /// First undamped natural frequency of the linearized beam, rad/s.
    pub fn first_natural_frequency(&self) -> f64 {
        self.omega_l1
    }

    pub fn tip_index(&self) -> usize {
        self.tip
    }

    pub fn params(&self) -> &BeamParams {
        &self.params
    }

    /// Unscaled forcing shape `ω_l1² M φ₁`.
    pub fn forcing_shape(&self) -> &DVector<T> {
        &self.f
    }
}

/// Beam with `elements` elements and excitation amplitude `e_amp`, other
/// parameters at their defaults.
pub fn beam_system<T: Real>(elements: usize, e_amp: f64) -> Result<Beam<T>> {
    Beam::new(&BeamParams {
        elements,
        e_amp,
        ..BeamParams::default()
    })
}

impl<T: Real> SecondOrderSystem<T> for Beam<T> {
    fn name(&self) -> &str {
        "beam"
    }
    fn n(&self) -> usize {
        self.m.nrows()
    }
    fn excitation_count(&self) -> usize {
        1
    }
    fn mass(&self) -> &DMatrix<T> {
        &self.m
    }
    fn damping(&self) -> &DMatrix<T> {
        &self.d
    }
    fn stiffness(&self) -> &DMatrix<T> {
        &self.k
    }
    fn theta(&self) -> &DMatrix<T> {
        &self.theta
    }
    fn is_linear(&self) -> bool {
        self.knl == T::zero()
    }
    fn force(&self, z: &[T], _zdot: &[T], out: &mut [T]) {
        out.fill(T::zero());
        let eta = z[self.tip];
        out[self.tip] = self.knl * eta * eta * eta;
    }
    fn force_jacobians(&self, z: &[T], _zdot: &[T], dz: &mut [T], dzdot: &mut [T]) {
        dz.fill(T::zero());
        dzdot.fill(T::zero());
        let n = self.n();
        let eta = z[self.tip];
        dz[self.tip + n * self.tip] = T::lit(3.0) * self.knl * eta * eta;
    }
    fn excitation(&self, tau: &[T], _omega: &[T], out: &mut [T]) {
        let c = T::lit(self.params.e_amp) * tau[0].cos();
        for (o, f) in out.iter_mut().zip(self.f.iter()) {
            *o = *f * c;
        }
    }
    fn observation(&self) -> DVector<T> {
        let mut v = DVector::zeros(self.n());
        v[self.tip] = T::one();
        v
    }
}

/// Dimensionless cantilevered pipe conveying fluid under base excitation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipeParams {
    #[serde(default = "default_pipe_modes")]
    pub modes: usize,
    /// Dimensionless flow velocity; the model has no default for it.
    pub flow_velocity: f64,
    #[serde(default = "default_mass_ratio")]
    pub mass_ratio: f64,
    #[serde(default = "default_dissipation")]
    pub dissipation: f64,
    #[serde(default)]
    pub e_amp: f64,
}

fn default_pipe_modes() -> usize {
    4
}
fn default_mass_ratio() -> f64 {
    0.2
}
fn default_dissipation() -> f64 {
    5e-3
}

/// Roots of `1 + cos λ cosh λ = 0`.
pub fn cantilever_roots(count: usize) -> Vec<f64> {
    (0..count)
        .map(|r| {
            let mut x = (r as f64 + 0.5) * std::f64::consts::PI;
            if r == 0 {
                x = 1.875;
            }
            for _ in 0..50 {
                let f = 1.0 + x.cos() * x.cosh();
                let df = -x.sin() * x.cosh() + x.cos() * x.sinh();
                let dx = f / df;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            x
        })
        .collect()
}

/// Unit-norm cantilever eigenfunction with root `lambda` and its first three
/// derivatives at `xi`.
fn cantilever_mode(lambda: f64, xi: f64) -> [f64; 4] {
    let sigma = (lambda.sinh() - lambda.sin()) / (lambda.cosh() + lambda.cos());
    let x = lambda * xi;
    let (s, c, sh, ch) = (x.sin(), x.cos(), x.sinh(), x.cosh());
    let l = lambda;
    [
        ch - c - sigma * (sh - s),
        l * (sh + s - sigma * (ch - c)),
        l * l * (ch + c - sigma * (sh + s)),
        l * l * l * (sh - s - sigma * (ch + c)),
    ]
}

/// Galerkin model `q̈ + C q̇ + K q + α q q q + β q q q̇ + γ q q̇ q̇ = g e ω₁² cos τ₁`
/// on `modes` cantilever eigenfunctions.
///
/// The cubic coefficients follow the inextensible pipe model: `α` from the
/// curvature term `η'(η'η'')'`, `β` from the Coriolis term, `γ` from the
/// inertial axial terms in `η̇'²`. Gravity and the `η̈`-dependent inertia
/// nonlinearities are omitted.
#[derive(Clone, Debug)]
pub struct Pipe<T: Real> {
    params: PipeParams,
    m: DMatrix<T>,
    d: DMatrix<T>,
    k: DMatrix<T>,
    theta: DMatrix<T>,
    alpha: Vec<T>,
    beta: Vec<T>,
    gamma: Vec<T>,
    g: DVector<T>,
    tip: DVector<T>,
}

impl<T: Real> Pipe<T> {
    pub fn new(params: &PipeParams) -> Result<Self> {
        let n = params.modes;
        if n == 0 {
            return Err(Error::InvalidModel("pipe needs at least one mode".into()));
        }
        if !params.flow_velocity.is_finite() || params.flow_velocity < 0.0 {
            return Err(Error::InvalidModel("flow velocity must be finite and ≥ 0".into()));
        }
        let lambdas = cantilever_roots(n);
        let (xg, wg) = gauss_legendre(200);
        let xi: Vec<f64> = xg.iter().map(|x| 0.5 * (x + 1.0)).collect();
        let w: Vec<f64> = wg.iter().map(|w| 0.5 * w).collect();
        let q = xi.len();
        // phi[r][p][der]
        let phi: Vec<Vec<[f64; 4]>> = lambdas
            .iter()
            .map(|&l| xi.iter().map(|&x| cantilever_mode(l, x)).collect())
            .collect();
        let fourth = |r: usize, p: usize| lambdas[r].powi(4) * phi[r][p][0];
        let quad = |f: &dyn Fn(usize) -> f64| (0..q).map(|p| w[p] * f(p)).sum::<f64>();

        let u = params.flow_velocity;
        let sb = params.mass_ratio.sqrt();
        let mut c = DMatrix::zeros(n, n);
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let bij = quad(&|p| phi[i][p][0] * phi[j][p][1]);
                let cij = quad(&|p| phi[i][p][0] * phi[j][p][2]);
                let dij = quad(&|p| phi[i][p][0] * fourth(j, p));
                c[(i, j)] = params.dissipation * dij + 2.0 * sb * u * bij;
                k[(i, j)] = dij + u * u * cij;
            }
        }

        // (φ_j' A)' with A = (φ_k' φ_l'')' = φ_k''φ_l'' + φ_k'φ_l''',
        // A' = φ_k'''φ_l'' + 2φ_k''φ_l''' + φ_k'φ_l'''' and φ'''' = λ⁴φ
        let idx = |i: usize, j: usize, kk: usize, l: usize| i + n * (j + n * (kk + n * l));
        let mut alpha = vec![0.0; n.pow(4)];
        let mut beta = vec![0.0; n.pow(4)];
        let mut gamma = vec![0.0; n.pow(4)];
        // cumulative G_kl(ξ) = ∫₀^ξ φ_k'φ_l' and H_kl(ξ) = ∫_ξ¹ s φ_k'φ_l' ds via nested Gauss rules
        let (xs, ws) = gauss_legendre(40);
        let dphi = |r: usize, x: f64| cantilever_mode(lambdas[r], x)[1];
        for i in 0..n {
            for j in 0..n {
                for kk in 0..n {
                    for l in 0..n {
                        let a = quad(&|p| {
                            let (pj, pk, pl) = (phi[j][p], phi[kk][p], phi[l][p]);
                            let inner = pk[2] * pl[2] + pk[1] * pl[3];
                            let dinner = pk[3] * pl[2] + 2.0 * pk[2] * pl[3] + pk[1] * fourth(l, p);
                            phi[i][p][0] * (pj[2] * inner + pj[1] * dinner)
                        });
                        alpha[idx(i, j, kk, l)] = a;
                        beta[idx(i, j, kk, l)] =
                            2.0 * sb * u * quad(&|p| phi[i][p][0] * phi[j][p][1] * phi[kk][p][1] * phi[l][p][1]);
                    }
                }
            }
        }
        for kk in 0..n {
            for l in kk..n {
                let g_at = |x: f64| {
                    let h = 0.5 * x;
                    (0..xs.len())
                        .map(|t| {
                            let s = h * (xs[t] + 1.0);
                            ws[t] * h * dphi(kk, s) * dphi(l, s)
                        })
                        .sum::<f64>()
                };
                let sg_tail = |x: f64| {
                    let h = 0.5 * (1.0 - x);
                    (0..xs.len())
                        .map(|t| {
                            let s = x + h * (xs[t] + 1.0);
                            ws[t] * h * s * dphi(kk, s) * dphi(l, s)
                        })
                        .sum::<f64>()
                };
                let g1 = g_at(1.0);
                let gs: Vec<f64> = xi.iter().map(|&x| g_at(x)).collect();
                let double: Vec<f64> = xi
                    .iter()
                    .zip(&gs)
                    .map(|(&x, &g)| g1 - x * g - sg_tail(x))
                    .collect();
                for i in 0..n {
                    for j in 0..n {
                        let v = quad(&|p| {
                            phi[i][p][0] * (phi[j][p][2] * double[p] - phi[j][p][1] * gs[p])
                        });
                        // symmetric in the two velocity slots
                        let v = if kk == l { v } else { 0.5 * v };
                        gamma[idx(i, j, kk, l)] = v;
                        gamma[idx(i, j, l, kk)] = v;
                    }
                }
            }
        }
        let g = DVector::from_fn(n, |i, _| quad(&|p| phi[i][p][0]));
        let tip = DVector::from_fn(n, |i, _| cantilever_mode(lambdas[i], 1.0)[0]);
        let cast = |x: DMatrix<f64>| x.map(T::lit);
        Ok(Self {
            params: params.clone(),
            m: DMatrix::identity(n, n),
            d: cast(c),
            k: cast(k),
            theta: DMatrix::identity(n, n),
            alpha: alpha.into_iter().map(T::lit).collect(),
            beta: beta.into_iter().map(T::lit).collect(),
            gamma: gamma.into_iter().map(T::lit).collect(),
            g: g.map(T::lit),
            tip: tip.map(T::lit),
        })
    }

    pub fn params(&self) -> &PipeParams {
        &self.params
    }

    fn idx(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        let n = self.params.modes;
        i + n * (j + n * (k + n * l))
    }
}

/// Pipe with `modes` modes at flow velocity `u` and excitation amplitude `e_amp`.
pub fn pipe_system<T: Real>(modes: usize, u: f64, e_amp: f64) -> Result<Pipe<T>> {
    Pipe::new(&PipeParams {
        modes,
        flow_velocity: u,
        mass_ratio: default_mass_ratio(),
        dissipation: default_dissipation(),
        e_amp,
    })
}

impl<T: Real> SecondOrderSystem<T> for Pipe<T> {
    fn name(&self) -> &str {
        "pipe"
    }
    fn n(&self) -> usize {
        self.params.modes
    }
    fn excitation_count(&self) -> usize {
        1
    }
    fn mass(&self) -> &DMatrix<T> {
        &self.m
    }
    fn damping(&self) -> &DMatrix<T> {
        &self.d
    }
    fn stiffness(&self) -> &DMatrix<T> {
        &self.k
    }
    fn theta(&self) -> &DMatrix<T> {
        &self.theta
    }
    fn force(&self, q: &[T], v: &[T], out: &mut [T]) {
        let n = self.n();
        for i in 0..n {
            let mut acc = T::zero();
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let id = self.idx(i, j, k, l);
                        acc += self.alpha[id] * q[j] * q[k] * q[l]
                            + self.beta[id] * q[j] * q[k] * v[l]
                            + self.gamma[id] * q[j] * v[k] * v[l];
                    }
                }
            }
            out[i] = acc;
        }
    }
    fn force_jacobians(&self, q: &[T], v: &[T], dz: &mut [T], dzdot: &mut [T]) {
        let n = self.n();
        dz.fill(T::zero());
        dzdot.fill(T::zero());
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let id = self.idx(i, j, k, l);
                        let (a, b, g) = (self.alpha[id], self.beta[id], self.gamma[id]);
                        dz[i + n * j] += a * q[k] * q[l] + b * q[k] * v[l] + g * v[k] * v[l];
                        dz[i + n * k] += a * q[j] * q[l] + b * q[j] * v[l];
                        dz[i + n * l] += a * q[j] * q[k];
                        dzdot[i + n * l] += b * q[j] * q[k] + g * q[j] * v[k];
                        dzdot[i + n * k] += g * q[j] * v[l];
                    }
                }
            }
        }
    }
    fn excitation(&self, tau: &[T], omega: &[T], out: &mut [T]) {
        let s = T::lit(self.params.e_amp) * omega[0] * omega[0] * tau[0].cos();
        for (o, g) in out.iter_mut().zip(self.g.iter()) {
            *o = *g * s;
        }
    }
    fn excitation_omega_derivative(&self, tau: &[T], omega: &[T], i: usize, out: &mut [T]) -> bool {
        if i != 0 {
            return false;
        }
        let s = T::lit(2.0 * self.params.e_amp) * omega[0] * tau[0].cos();
        for (o, g) in out.iter_mut().zip(self.g.iter()) {
            *o = *g * s;
        }
        true
    }
    fn observation(&self) -> DVector<T> {
        self.tip.clone()
    }
}

/// Central-difference Jacobians of `F⁰`, for validating analytic ones.
pub fn finite_difference_jacobians<T: Real>(
    system: &dyn SecondOrderSystem<T>,
    z: &[T],
    zdot: &[T],
    rel_step: T,
) -> (Vec<T>, Vec<T>) {
    let n = system.n();
    let mut dz = vec![T::zero(); n * n];
    let mut dzdot = vec![T::zero(); n * n];
    let mut fp = vec![T::zero(); n];
    let mut fm = vec![T::zero(); n];
    for (which, out) in [(0, &mut dz), (1, &mut dzdot)] {
        for col in 0..n {
            let base = if which == 0 { z[col] } else { zdot[col] };
            let h = rel_step * (T::one() + base.abs());
            let (mut zp, mut vp) = (z.to_vec(), zdot.to_vec());
            let (mut zm, mut vm) = (z.to_vec(), zdot.to_vec());
            if which == 0 {
                zp[col] += h;
                zm[col] -= h;
            } else {
                vp[col] += h;
                vm[col] -= h;
            }
            system.force(&zp, &vp, &mut fp);
            system.force(&zm, &vm, &mut fm);
            for row in 0..n {
                out[row + n * col] = (fp[row] - fm[row]) / (h + h);
            }
        }
    }
    (dz, dzdot)
}
