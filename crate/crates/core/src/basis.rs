//! Per-dimension discretizations of a periodic function of one hyper-time
//! angle: truncated Fourier series (HB), piecewise Lagrange collocation (CO)
//! and periodic finite differences (FD).
//!
//! Matrices are always built in `f64` and converted to the working scalar at
//! the end, so `f32` users get correctly rounded constants.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{wrap_angle, Real};

/// Collocation node family used inside every CO interval.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeFamily {
    #[default]
    Gauss,
    Chebyshev,
}

/// Discretization choice for one torus dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSpec {
    /// Fourier series `[1, cos(u₁τ), sin(u₁τ), …]` sampled on `samples` points.
    Hb { orders: Vec<u32>, samples: usize },
    /// `intervals` Lagrange pieces of degree `degree`; `U = S = intervals · degree`.
    Co {
        intervals: usize,
        degree: usize,
        #[serde(default)]
        nodes: NodeFamily,
    },
    /// Stencil offsets around each of `points` equispaced base points.
    Fd { stencil: Vec<i32>, points: usize },
}

impl BasisSpec {
    /// HB with the consecutive orders `1..=harmonics`.
    pub fn hb(harmonics: u32, samples: usize) -> Self {
        BasisSpec::Hb {
            orders: (1..=harmonics).collect(),
            samples,
        }
    }

    pub fn co(intervals: usize, degree: usize) -> Self {
        BasisSpec::Co {
            intervals,
            degree,
            nodes: NodeFamily::Gauss,
        }
    }

    pub fn fd(stencil: &[i32], points: usize) -> Self {
        BasisSpec::Fd {
            stencil: stencil.to_vec(),
            points,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            BasisSpec::Hb { .. } => "HB",
            BasisSpec::Co { .. } => "CO",
            BasisSpec::Fd { .. } => "FD",
        }
    }

    /// Coefficient-space size.
    pub fn u(&self) -> usize {
        match self {
            BasisSpec::Hb { orders, .. } => 2 * orders.len() + 1,
            BasisSpec::Co {
                intervals, degree, ..
            } => intervals * degree,
            BasisSpec::Fd { points, .. } => *points,
        }
    }

    /// Sample-grid size.
    pub fn s(&self) -> usize {
        match self {
            BasisSpec::Hb { samples, .. } => *samples,
            _ => self.u(),
        }
    }

    /// True when coefficients are grid values (CO and FD).
    pub fn is_nodal(&self) -> bool {
        !matches!(self, BasisSpec::Hb { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BasisSpec::Hb { orders, samples } => {
                if orders.is_empty() || orders[0] == 0 {
                    return Err(Error::InvalidBasis(
                        "harmonic orders must be positive and non-empty".into(),
                    ));
                }
                if orders.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidBasis(
                        "harmonic orders must be strictly increasing".into(),
                    ));
                }
                let u = self.u();
                let top = *orders.last().unwrap() as usize;
                if *samples < u || 2 * top >= *samples {
                    return Err(Error::Aliasing(format!(
                        "{samples} samples cannot resolve {u} coefficients up to order {top}"
                    )));
                }
            }
            BasisSpec::Co {
                intervals, degree, ..
            } => {
                if *intervals == 0 || *degree == 0 {
                    return Err(Error::InvalidBasis(
                        "collocation needs at least one interval of degree ≥ 1".into(),
                    ));
                }
            }
            BasisSpec::Fd { stencil, points } => {
                if !stencil.contains(&0) {
                    return Err(Error::Stencil("stencil must contain offset 0".into()));
                }
                if stencil.len() < 3 {
                    return Err(Error::Stencil(
                        "second derivatives need at least three stencil points".into(),
                    ));
                }
                if stencil.len() > *points {
                    return Err(Error::Stencil(format!(
                        "stencil of {} points exceeds {points} base points",
                        stencil.len()
                    )));
                }
                let lo = *stencil.iter().min().unwrap() as i64;
                let hi = *stencil.iter().max().unwrap() as i64;
                if (hi - lo) as usize >= *points {
                    return Err(Error::Stencil(
                        "stencil wraps onto itself on the periodic grid".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Equispaced sample angles `2π j / S`.
    pub fn grid(&self) -> Vec<f64> {
        let s = self.s();
        (0..s).map(|j| TAU * j as f64 / s as f64).collect()
    }
}

/// Constant matrices of one basis.
#[derive(Clone, Debug)]
pub struct BasisMatrices<T: Real> {
    pub spec: BasisSpec,
    pub ups0: DMatrix<T>,
    pub ups1: DMatrix<T>,
    pub ups2: DMatrix<T>,
    pub gamma0: DMatrix<T>,
    pub gamma1: DMatrix<T>,
    pub gamma0inv: DMatrix<T>,
    pub phase1: DMatrix<T>,
    pub phase2: DMatrix<T>,
}

impl<T: Real> BasisMatrices<T> {
    pub fn u(&self) -> usize {
        self.ups0.nrows()
    }

    pub fn s(&self) -> usize {
        self.gamma0.nrows()
    }
}

fn cast<T: Real>(m: DMatrix<f64>) -> DMatrix<T> {
    m.map(T::lit)
}

/// Builds the constant matrices for `spec`.
pub fn build<T: Real>(spec: &BasisSpec) -> Result<BasisMatrices<T>> {
    spec.validate()?;
    let m = match spec {
        BasisSpec::Hb { orders, samples } => build_hb(orders, *samples),
        BasisSpec::Co {
            intervals,
            degree,
            nodes,
        } => build_co(*intervals, *degree, *nodes)?,
        BasisSpec::Fd { stencil, points } => build_fd(stencil, *points)?,
    };
    Ok(BasisMatrices {
        spec: spec.clone(),
        ups0: cast(m.ups0),
        ups1: cast(m.ups1),
        ups2: cast(m.ups2),
        gamma0: cast(m.gamma0),
        gamma1: cast(m.gamma1),
        gamma0inv: cast(m.gamma0inv),
        phase1: cast(m.phase1),
        phase2: cast(m.phase2),
    })
}

struct Raw {
    ups0: DMatrix<f64>,
    ups1: DMatrix<f64>,
    ups2: DMatrix<f64>,
    gamma0: DMatrix<f64>,
    gamma1: DMatrix<f64>,
    gamma0inv: DMatrix<f64>,
    phase1: DMatrix<f64>,
    phase2: DMatrix<f64>,
}

fn build_hb(orders: &[u32], s: usize) -> Raw {
    let u = 2 * orders.len() + 1;
    let mut nabla = DMatrix::zeros(u, u);
    for (l, &k) in orders.iter().enumerate() {
        let c = 1 + 2 * l;
        nabla[(c, c + 1)] = k as f64;
        nabla[(c + 1, c)] = -(k as f64);
    }
    let nabla2 = &nabla * &nabla;
    let mut gamma0 = DMatrix::zeros(s, u);
    let mut gamma0inv = DMatrix::zeros(u, s);
    let scale = 1.0 / s as f64;
    for j in 0..s {
        let tau = TAU * j as f64 / s as f64;
        gamma0[(j, 0)] = 1.0;
        gamma0inv[(0, j)] = scale;
        for (l, &k) in orders.iter().enumerate() {
            let (sn, cs) = (k as f64 * tau).sin_cos();
            gamma0[(j, 1 + 2 * l)] = cs;
            gamma0[(j, 2 + 2 * l)] = sn;
            gamma0inv[(1 + 2 * l, j)] = 2.0 * scale * cs;
            gamma0inv[(2 + 2 * l, j)] = 2.0 * scale * sn;
        }
    }
    let gamma1 = &gamma0 * &nabla;
    Raw {
        ups0: DMatrix::identity(u, u),
        ups1: nabla.clone(),
        ups2: nabla2.clone(),
        gamma0,
        gamma1,
        gamma0inv,
        phase1: nabla,
        phase2: nabla2,
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            if n == 1 {
                p1 = z;
                p0 = 1.0;
            }
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let weight = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = weight;
        w[n - 1 - i] = weight;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn local_nodes(family: NodeFamily, m: usize) -> Vec<f64> {
    match family {
        NodeFamily::Gauss => gauss_legendre(m).0,
        NodeFamily::Chebyshev => (0..m)
            .map(|q| -(std::f64::consts::PI * (2 * q + 1) as f64 / (2 * m) as f64).cos())
            .collect(),
    }
}

/// Lagrange cardinal polynomials through `nodes` and their first derivatives at `tau`.
pub fn lagrange_basis(nodes: &[f64], tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = nodes.len();
    for a in 0..k {
        for b in a + 1..k {
            if nodes[a] == nodes[b] {
                return Err(Error::Stencil(format!("duplicate Lagrange node {}", nodes[a])));
            }
        }
    }
    let mut values = vec![0.0; k];
    let mut derivs = vec![0.0; k];
    for w in 0..k {
        let mut v = 1.0;
        for o in 0..k {
            if o != w {
                v *= (tau - nodes[o]) / (nodes[w] - nodes[o]);
            }
        }
        values[w] = v;
        let mut d = 0.0;
        for o in 0..k {
            if o == w {
                continue;
            }
            let mut prod = 1.0 / (nodes[w] - nodes[o]);
            for p in 0..k {
                if p != w && p != o {
                    prod *= (tau - nodes[p]) / (nodes[w] - nodes[p]);
                }
            }
            d += prod;
        }
        derivs[w] = d;
    }
    Ok((values, derivs))
}

fn co_interval_points(l: usize, m: usize, u: usize) -> Vec<f64> {
    let h = TAU / u as f64;
    (0..=m).map(|w| (l * m + w) as f64 * h).collect()
}

fn build_co(p: usize, m: usize, family: NodeFamily) -> Result<Raw> {
    let u = p * m;
    let xi = local_nodes(family, m);
    let mut l0 = DMatrix::zeros(u, u);
    let mut l1 = DMatrix::zeros(u, u);
    let mut lbar = DMatrix::zeros(u, u);
    for l in 0..p {
        let pts = co_interval_points(l, m, u);
        let (a, b) = (pts[0], pts[m]);
        for (q, &x) in xi.iter().enumerate() {
            let tau = a + (b - a) * (x + 1.0) / 2.0;
            let (v, d) = lagrange_basis(&pts, tau)?;
            for w in 0..=m {
                let col = (l * m + w) % u;
                l0[(l * m + q, col)] += v[w];
                l1[(l * m + q, col)] += d[w];
            }
        }
        for w in 0..m {
            let (_, d) = lagrange_basis(&pts, pts[w])?;
            for (wp, dv) in d.iter().enumerate() {
                lbar[(l * m + w, (l * m + wp) % u)] += dv;
            }
        }
    }
    let ups2 = &l1 * &lbar;
    let lbar2 = &lbar * &lbar;
    Ok(Raw {
        ups0: l0,
        ups1: l1,
        ups2,
        gamma0: DMatrix::identity(u, u),
        gamma1: lbar.clone(),
        gamma0inv: DMatrix::identity(u, u),
        phase1: lbar,
        phase2: lbar2,
    })
}

/// Finite-difference weights for the `g`-th derivative on unit spacing, one per
/// offset in `stencil`.
pub fn fd_stencil(stencil: &[i32], g: usize) -> Result<Vec<f64>> {
    let nk = stencil.len();
    if nk < g + 1 {
        return Err(Error::Stencil(format!(
            "{nk} offsets cannot resolve derivative order {g}"
        )));
    }
    let mut sorted = stencil.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Stencil("stencil offsets must be distinct".into()));
    }
    let v = DMatrix::from_fn(nk, nk, |p, j| (stencil[j] as f64).powi(p as i32));
    let mut rhs = DVector::zeros(nk);
    rhs[g] = (1..=g).product::<usize>() as f64;
    let lu = v.lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Stencil("singular Vandermonde system".into()))?;
    if sol.iter().any(|c| !c.is_finite()) {
        return Err(Error::Stencil("singular Vandermonde system".into()));
    }
    Ok(sol.iter().copied().collect())
}

fn circulant(stencil: &[i32], coeffs: &[f64], u: usize, scale: f64) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(u, u);
    for j in 0..u {
        for (&k, &c) in stencil.iter().zip(coeffs) {
            let col = (j as i64 + k as i64).rem_euclid(u as i64) as usize;
            t[(j, col)] += c * scale;
        }
    }
    t
}

fn build_fd(stencil: &[i32], u: usize) -> Result<Raw> {
    let dt = TAU / u as f64;
    let a1 = fd_stencil(stencil, 1)?;
    let a2 = fd_stencil(stencil, 2)?;
    let t1 = circulant(stencil, &a1, u, 1.0 / dt);
    let t2 = circulant(stencil, &a2, u, 1.0 / (dt * dt));
    Ok(Raw {
        ups0: DMatrix::identity(u, u),
        ups1: t1.clone(),
        ups2: t2.clone(),
        gamma0: DMatrix::identity(u, u),
        gamma1: t1.clone(),
        gamma0inv: DMatrix::identity(u, u),
        phase1: t1,
        phase2: t2,
    })
}

/// Periodic trigonometric interpolation weights of `u` equispaced samples at
/// `tau`, and their derivatives.
pub fn trig_interp_row(u: usize, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let half = u / 2;
    let mut v = vec![0.0; u];
    let mut d = vec![0.0; u];
    for j in 0..u {
        let x = tau - TAU * j as f64 / u as f64;
        let mut val = 1.0;
        let mut der = 0.0;
        for k in 1..=half {
            let c = if u % 2 == 0 && k == half { 1.0 } else { 2.0 };
            let (s, co) = (k as f64 * x).sin_cos();
            val += c * co;
            der -= c * k as f64 * s;
        }
        v[j] = val / u as f64;
        d[j] = der / u as f64;
    }
    (v, d)
}

/// Row `Φ(τ)` mapping coefficients to the function value at `tau`, together with
/// its derivative row `Φ'(τ)`.
pub fn synthesize_rows(spec: &BasisSpec, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let tau = wrap_angle(tau);
    match spec {
        BasisSpec::Hb { orders, .. } => {
            let u = spec.u();
            let mut v = vec![0.0; u];
            let mut d = vec![0.0; u];
            v[0] = 1.0;
            for (l, &k) in orders.iter().enumerate() {
                let k = k as f64;
                let (s, c) = (k * tau).sin_cos();
                v[1 + 2 * l] = c;
                v[2 + 2 * l] = s;
                d[1 + 2 * l] = -k * s;
                d[2 + 2 * l] = k * c;
            }
            (v, d)
        }
        BasisSpec::Co {
            intervals, degree, ..
        } => {
            let (p, m) = (*intervals, *degree);
            let u = p * m;
            let width = TAU / p as f64;
            let l = ((tau / width).floor() as usize).min(p - 1);
            let pts = co_interval_points(l, m, u);
            let (vals, ders) = lagrange_basis(&pts, tau).expect("distinct base points");
            let mut v = vec![0.0; u];
            let mut d = vec![0.0; u];
            for w in 0..=m {
                v[(l * m + w) % u] += vals[w];
                d[(l * m + w) % u] += ders[w];
            }
            (v, d)
        }
        BasisSpec::Fd { points, .. } => trig_interp_row(*points, tau),
    }
}

/// Row `Φ(τ)` of `spec` as a `1 × U` matrix.
pub fn synthesize_row<T: Real>(spec: &BasisSpec, tau: T) -> DMatrix<T> {
    let (v, _) = synthesize_rows(spec, tau.as_f64());
    DMatrix::from_iterator(1, v.len(), v.into_iter().map(T::lit))
}
