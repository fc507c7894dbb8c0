//! Pseudo-arclength continuation of torus branches.
//!
//! The unknown vector is `y = [Z^d; ω₁ … ω_d]` when the parameter is one of the
//! frequencies, and `y = [Z^d; ω₁ … ω_d; p]` when it scales the excitation.
//! Each frequency that is neither the parameter nor otherwise pinned needs one
//! constraint row: a phase condition, a ratio to another frequency, or a fixed
//! value.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::scalar::{lu_solve_vec, Real};
use crate::vcf::{Stability, TorusPoint, VcfOperator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parameter {
    /// `p ≡ ωᵢ` (0-based).
    Frequency { index: usize },
    /// `p` multiplies the excitation.
    ExcitationScale,
}

impl Default for Parameter {
    fn default() -> Self {
        Parameter::Frequency { index: 0 }
    }
}

/// `ω_a = ratio · ω_b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRatio {
    pub a: usize,
    pub b: usize,
    pub ratio: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Unit Euclidean norm of the tangent.
    #[default]
    Arclength,
    /// Unit parameter component, falling back to arclength near folds.
    Parameter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationOptions {
    pub parameter: Parameter,
    pub step: f64,
    pub step_min: f64,
    pub step_max: f64,
    pub step_grow: f64,
    pub step_shrink: f64,
    /// Steps converging within this many iterations grow the step.
    pub fast_iterations: usize,
    pub max_newton: usize,
    pub tolerance: f64,
    pub max_points: usize,
    pub p_min: f64,
    pub p_max: f64,
    /// Sign of the initial parameter increment, or of the first step along
    /// the initial point's tangent when it carries one.
    pub direction: f64,
    pub normalization: Normalization,
    /// Frequencies (0-based) fixed by a phase condition.
    pub phase_conditions: Vec<usize>,
    pub ratios: Vec<FrequencyRatio>,
    /// Frequencies (0-based) held at their initial value.
    pub fixed_frequencies: Vec<usize>,
    /// Steps turning the tangent further than this cosine are retried shorter.
    pub min_tangent_cosine: f64,
    /// Under arclength normalization, steps whose corrector moves further
    /// than this multiple of the step from the predictor are retried shorter.
    pub max_correction_ratio: f64,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            parameter: Parameter::default(),
            step: 0.05,
            step_min: 1e-5,
            step_max: 0.5,
            step_grow: 2.0,
            step_shrink: 0.5,
            fast_iterations: 3,
            max_newton: 15,
            tolerance: 1e-8,
            max_points: 500,
            p_min: f64::NEG_INFINITY,
            p_max: f64::INFINITY,
            direction: 1.0,
            normalization: Normalization::Arclength,
            phase_conditions: Vec::new(),
            ratios: Vec::new(),
            fixed_frequencies: Vec::new(),
            min_tangent_cosine: 0.8,
            max_correction_ratio: 0.5,
        }
    }
}

impl ContinuationOptions {
    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidOptions(m.to_string()));
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if !(self.step_min > 0.0 && self.step_min <= self.step && self.step <= self.step_max) {
            return bad("steps must satisfy 0 < step_min ≤ step ≤ step_max");
        }
        if !(self.step_grow >= 1.0 && self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return bad("step_grow must be ≥ 1 and step_shrink in (0, 1)");
        }
        if self.max_newton == 0 || self.max_points == 0 {
            return bad("max_newton and max_points must be positive");
        }
        if self.p_min > self.p_max {
            return bad("p_min must not exceed p_max");
        }
        if !(-1.0..=1.0).contains(&self.min_tangent_cosine) || !(self.max_correction_ratio > 0.0) {
            return bad("min_tangent_cosine must lie in [-1, 1] and max_correction_ratio be positive");
        }
        if self.direction == 0.0 || !self.direction.is_finite() {
            return bad("direction must be a nonzero number");
        }
        if let Parameter::Frequency { index } = self.parameter {
            if index >= d {
                return Err(Error::IndexOutOfRange { index, len: d });
            }
        }
        let in_range = |i: usize| if i < d { Ok(()) } else { Err(Error::IndexOutOfRange { index: i, len: d }) };
        for &i in self.phase_conditions.iter().chain(&self.fixed_frequencies) {
            in_range(i)?;
        }
        for r in &self.ratios {
            in_range(r.a)?;
            in_range(r.b)?;
            if r.a == r.b || !r.ratio.is_finite() {
                return bad("a ratio needs two distinct frequencies and a finite value");
            }
        }
        Ok(())
    }

    fn constraint_rows(&self) -> usize {
        self.phase_conditions.len() + self.ratios.len() + self.fixed_frequencies.len()
    }
}

/// Applies `mat` along torus dimension `i` of a coefficient vector, or its
/// transpose when `transpose` is set.
fn apply_along(mat: &DMatrix<f64>, x: &[f64], u: &[usize], i: usize, transpose: bool) -> Vec<f64> {
    let ui = u[i];
    let inner: usize = u[i + 1..].iter().product();
    let block = inner * ui;
    let outer = x.len() / block;
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for k in 0..ui {
            for kp in 0..ui {
                let c = if transpose { mat[(kp, k)] } else { mat[(k, kp)] };
                if c == 0.0 {
                    continue;
                }
                let (dst, src) = (o * block + k * inner, o * block + kp * inner);
                for r in 0..inner {
                    y[dst + r] += c * x[src + r];
                }
            }
        }
    }
    y
}

/// Phase-condition row `ℓᵢ = Λᵢ¹z + Λᵢ¹ᵀΛᵢ²z` for dimension `i` (0-based), where
/// `Λᵢᵏ` applies the phase matrix of order `k` along that dimension.
pub fn phase_row<T: Real>(zd: &[T], op: &VcfOperator<T>, i: usize) -> Result<DVector<T>> {
    let d = op.d();
    if i >= d {
        return Err(Error::IndexOutOfRange { index: i, len: d });
    }
    let u: Vec<usize> = op.specs().iter().map(BasisSpec::u).collect();
    let b = &op.bases()[i];
    let p1 = b.phase1.map(|x| x.as_f64());
    let p2 = b.phase2.map(|x| x.as_f64());
    let z: Vec<f64> = zd.iter().map(|x| x.as_f64()).collect();
    let l1 = apply_along(&p1, &z, &u, i, false);
    let l2 = apply_along(&p2, &z, &u, i, false);
    let back = apply_along(&p1, &l2, &u, i, true);
    Ok(DVector::from_iterator(
        zd.len(),
        l1.iter().zip(&back).map(|(a, b)| T::lit(a + b)),
    ))
}

/// Index of a fallback pinning coefficient for dimension `i`: the first
/// non-constant slot of that dimension on DOF 0.
fn pinning_index(specs: &[BasisSpec], i: usize) -> usize {
    let inner: usize = specs[i + 1..].iter().map(BasisSpec::u).product();
    let slot = match specs[i] {
        BasisSpec::Hb { .. } => 2,
        _ => 1,
    };
    slot.min(specs[i].u() - 1) * inner
}

/// Linearized constraint rows that stay fixed during one correction.
#[derive(Clone, Debug)]
pub struct PhaseReference<T: Real> {
    zd: Vec<T>,
    rows: Vec<DVector<T>>,
}

impl<T: Real> PhaseReference<T> {
    /// Phase rows evaluated at the converged coefficients `zd`.
    pub fn new(op: &VcfOperator<T>, zd: &[T], options: &ContinuationOptions) -> Result<Self> {
        let mut rows = Vec::with_capacity(options.phase_conditions.len());
        for &i in &options.phase_conditions {
            let row = phase_row(zd, op, i)?;
            let scale = T::one() + DVector::from_column_slice(zd).norm();
            if row.norm() <= T::lit(1e-12) * scale {
                warn!("phase row for dimension {} is degenerate; pinning a coefficient instead", i + 1);
                let mut pin = DVector::zeros(zd.len());
                pin[pinning_index(op.specs(), i)] = T::one();
                rows.push(pin);
            } else {
                rows.push(row);
            }
        }
        Ok(Self { zd: zd.to_vec(), rows })
    }

    pub fn rows(&self) -> &[DVector<T>] {
        &self.rows
    }
}

/// Problem layout shared by the predictor and corrector.
#[derive(Clone, Debug)]
pub struct Layout {
    pub coeffs: usize,
    pub d: usize,
    pub parameter: Parameter,
}

impl Layout {
    pub fn unknowns(&self) -> usize {
        self.coeffs + self.d + usize::from(self.parameter == Parameter::ExcitationScale)
    }

    pub fn parameter_index(&self) -> usize {
        match self.parameter {
            Parameter::Frequency { index } => self.coeffs + index,
            Parameter::ExcitationScale => self.coeffs + self.d,
        }
    }

    pub fn pack<T: Real>(&self, zd: &[T], omega: &[T], p: T) -> DVector<T> {
        let mut y = DVector::zeros(self.unknowns());
        y.rows_mut(0, self.coeffs).copy_from_slice(zd);
        y.rows_mut(self.coeffs, self.d).copy_from_slice(omega);
        if self.parameter == Parameter::ExcitationScale {
            y[self.coeffs + self.d] = p;
        }
        y
    }

    pub fn omega<T: Real>(&self, y: &DVector<T>) -> Vec<T> {
        y.rows(self.coeffs, self.d).iter().copied().collect()
    }

    pub fn p<T: Real>(&self, y: &DVector<T>) -> T {
        y[self.parameter_index()]
    }

    pub fn point<T: Real>(&self, y: &DVector<T>) -> TorusPoint<T> {
        TorusPoint::new(
            y.rows(0, self.coeffs).iter().copied().collect(),
            self.omega(y),
            self.p(y),
        )
    }
}

/// Operator at the frequencies and parameter held in `y`.
pub fn operator_at<T: Real>(base: &VcfOperator<T>, layout: &Layout, y: &DVector<T>) -> Result<VcfOperator<T>> {
    let omega = layout.omega(y);
    let op = if omega.as_slice() == base.omega() {
        base.clone()
    } else {
        base.at_omega(&omega)?
    };
    Ok(match layout.parameter {
        Parameter::ExcitationScale => op.with_excitation_scale(layout.p(y)),
        Parameter::Frequency { .. } => op,
    })
}

fn check_rows(layout: &Layout, options: &ContinuationOptions) -> Result<usize> {
    let unknowns = layout.unknowns();
    let extra = options.constraint_rows();
    if layout.coeffs + extra + 1 != unknowns {
        return Err(Error::ConstraintMismatch {
            rows: extra,
            unknowns,
            expected: unknowns - 1 - layout.coeffs,
        });
    }
    Ok(layout.coeffs + extra)
}

/// Stacked residual of `R^d` and the constraint rows.
pub fn extended_residual<T: Real>(
    op: &VcfOperator<T>,
    layout: &Layout,
    y: &DVector<T>,
    reference: &PhaseReference<T>,
    initial_omega: &[T],
    options: &ContinuationOptions,
) -> Result<DVector<T>> {
    let rows = check_rows(layout, options)?;
    let nc = layout.coeffs;
    let zd: Vec<T> = y.rows(0, nc).iter().copied().collect();
    let mut r = DVector::zeros(rows);
    r.rows_mut(0, nc).copy_from(&op.residual(&zd)?);
    let mut row = nc;
    if !reference.rows().is_empty() {
        let dz = DVector::from_column_slice(&zd) - DVector::from_column_slice(&reference.zd);
        for l in reference.rows() {
            r[row] = l.dot(&dz);
            row += 1;
        }
    }
    for q in &options.ratios {
        r[row] = y[nc + q.a] - T::lit(q.ratio) * y[nc + q.b];
        row += 1;
    }
    for &i in &options.fixed_frequencies {
        r[row] = y[nc + i] - initial_omega[i];
        row += 1;
    }
    Ok(r)
}

/// Jacobian of [`extended_residual`] with respect to `y`.
pub fn extended_jacobian<T: Real>(
    op: &VcfOperator<T>,
    layout: &Layout,
    y: &DVector<T>,
    reference: &PhaseReference<T>,
    options: &ContinuationOptions,
) -> Result<DMatrix<T>> {
    let rows = check_rows(layout, options)?;
    let (nc, d) = (layout.coeffs, layout.d);
    let zd: Vec<T> = y.rows(0, nc).iter().copied().collect();
    let mut j = DMatrix::zeros(rows, layout.unknowns());
    j.view_mut((0, 0), (nc, nc)).copy_from(&op.jacobian_z(&zd)?);
    for i in 0..d {
        j.view_mut((0, nc + i), (nc, 1)).copy_from(&op.jacobian_omega(i, &zd)?);
    }
    if layout.parameter == Parameter::ExcitationScale {
        let dp = -op.apply_theta(op.unit_excitation_coeffs().clone());
        j.view_mut((0, nc + d), (nc, 1)).copy_from(&dp);
    }
    let mut row = nc;
    for l in reference.rows() {
        j.view_mut((row, 0), (1, nc)).copy_from(&l.transpose());
        row += 1;
    }
    for q in &options.ratios {
        j[(row, nc + q.a)] = T::one();
        j[(row, nc + q.b)] = -T::lit(q.ratio);
        row += 1;
    }
    for &i in &options.fixed_frequencies {
        j[(row, nc + i)] = T::one();
        row += 1;
    }
    Ok(j)
}

/// Stacked residual and Jacobian of `R^d` and the constraint rows, without
/// the continuation row. `initial_omega` supplies the values of fixed frequencies.
pub fn extended_system<T: Real>(
    op: &VcfOperator<T>,
    layout: &Layout,
    y: &DVector<T>,
    reference: &PhaseReference<T>,
    initial_omega: &[T],
    options: &ContinuationOptions,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let r = extended_residual(op, layout, y, reference, initial_omega, options)?;
    let j = extended_jacobian(op, layout, y, reference, options)?;
    Ok((r, j))
}

/// Extra row closing the square Newton system.
#[derive(Clone, Debug)]
pub enum ClosingRow<T: Real> {
    /// `tᵀ(y − y_pred) = 0`.
    Orthogonal { tangent: DVector<T>, predicted: DVector<T> },
    /// `p = value`.
    FixedParameter(T),
}

#[derive(Clone, Debug)]
pub struct Correction<T: Real> {
    pub y: DVector<T>,
    pub iterations: usize,
    /// Norm of the stacked residual before each Newton update and at exit.
    pub history: Vec<f64>,
}

struct Solver<'a, T: Real> {
    base: &'a VcfOperator<T>,
    layout: Layout,
    options: &'a ContinuationOptions,
    initial_omega: Vec<T>,
}

impl<T: Real> Solver<'_, T> {
    fn newton(&self, y0: DVector<T>, reference: &PhaseReference<T>, closing: &ClosingRow<T>) -> Result<Correction<T>> {
        let mut y = y0;
        let mut history = Vec::new();
        let tol = self.options.tolerance;
        let m = self.layout.unknowns();
        for it in 0..=self.options.max_newton {
            let op = operator_at(self.base, &self.layout, &y)?;
            let r0 = extended_residual(&op, &self.layout, &y, reference, &self.initial_omega, self.options)?;
            let mut r = DVector::zeros(m);
            r.rows_mut(0, m - 1).copy_from(&r0);
            r[m - 1] = match closing {
                ClosingRow::Orthogonal { tangent, predicted } => tangent.dot(&(&y - predicted)),
                ClosingRow::FixedParameter(p) => y[self.layout.parameter_index()] - *p,
            };
            let norm = r.norm().as_f64();
            history.push(norm);
            if !norm.is_finite() {
                return Err(Error::NumericalBlowup("non-finite residual".into()));
            }
            if norm < tol {
                return Ok(Correction {
                    y,
                    iterations: it,
                    history,
                });
            }
            if it == self.options.max_newton {
                break;
            }
            let j0 = extended_jacobian(&op, &self.layout, &y, reference, self.options)?;
            let mut j = DMatrix::zeros(m, m);
            j.view_mut((0, 0), (m - 1, m)).copy_from(&j0);
            match closing {
                ClosingRow::Orthogonal { tangent, .. } => j.row_mut(m - 1).copy_from(&tangent.transpose()),
                ClosingRow::FixedParameter(_) => j[(m - 1, self.layout.parameter_index())] = T::one(),
            }
            let delta = lu_solve_vec(&j, &r).ok_or(Error::Singular("Newton correction"))?;
            y -= delta;
        }
        Err(Error::NoConvergence {
            residual: *history.last().unwrap_or(&f64::NAN),
            iterations: self.options.max_newton,
        })
    }

    /// Unit tangent from the bordered system `[J; rowᵀ] t = e_last`.
    fn tangent(&self, y: &DVector<T>, reference: &PhaseReference<T>, row: &DVector<T>) -> Result<DVector<T>> {
        let op = operator_at(self.base, &self.layout, y)?;
        let j = extended_jacobian(&op, &self.layout, y, reference, self.options)?;
        let m = self.layout.unknowns();
        let mut a = DMatrix::zeros(m, m);
        a.view_mut((0, 0), (m - 1, m)).copy_from(&j);
        a.row_mut(m - 1).copy_from(&row.transpose());
        let mut e = DVector::zeros(m);
        e[m - 1] = T::one();
        let t = lu_solve_vec(&a, &e)
            .ok_or_else(|| Error::FoldHandling(self.layout.p(y).as_f64()))?;
        if !t.iter().all(|x| x.is_finite()) {
            return Err(Error::FoldHandling(self.layout.p(y).as_f64()));
        }
        let mut t = t.normalize();
        if t.dot(row) < T::zero() {
            t = -t;
        }
        Ok(t)
    }
}

/// Step along `tangent` under the configured normalization.
fn scaled_step<T: Real>(tangent: &DVector<T>, layout: &Layout, normalization: Normalization, s: T) -> DVector<T> {
    match normalization {
        Normalization::Arclength => tangent * s,
        Normalization::Parameter => {
            let tp = tangent[layout.parameter_index()].abs();
            if tp < T::lit(1e-8) {
                debug!("parameter component vanishes; stepping in arclength");
                tangent * s
            } else {
                tangent * (s / tp)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BifurcationKind {
    NeimarkSacker,
    SaddleNode,
    PeriodDoubling,
}

impl BifurcationKind {
    pub fn tag(&self) -> &'static str {
        match self {
            BifurcationKind::NeimarkSacker => "NS",
            BifurcationKind::SaddleNode => "SN",
            BifurcationKind::PeriodDoubling => "PD",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bifurcation {
    pub kind: BifurcationKind,
    /// Index of the first point past the crossing.
    pub index: usize,
    /// Parameter value linearly interpolated between the bracketing points.
    pub p: f64,
}

/// Stability verdict for one converged point.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub stability: Stability,
    /// Crossing detected between the previous point and this one, with the
    /// interpolated fraction of the step at which it happens.
    pub bifurcation: Option<(BifurcationKind, f64)>,
}

/// Hook called on every converged point, in branch order.
pub trait PointMonitor<T: Real> {
    fn inspect(&mut self, op: &VcfOperator<T>, point: &TorusPoint<T>) -> Result<Inspection>;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct BranchPoint<T> {
    pub point: TorusPoint<T>,
    pub amplitude: f64,
    pub residual_norm: f64,
    pub newton_iterations: usize,
    pub step: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ParameterBound,
    MaxPoints,
    Stalled,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Branch<T> {
    pub points: Vec<BranchPoint<T>>,
    pub bifurcations: Vec<Bifurcation>,
    pub total_newton_iterations: usize,
    pub failed_corrections: usize,
    pub wall_time_s: f64,
    pub stop_reason: StopReason,
}

/// `max |c·Z⁰|` over the S grid, `c` being the model's observation weights.
pub fn amplitude<T: Real>(op: &VcfOperator<T>, zd: &[T]) -> Result<f64> {
    let (z0, _) = op.aus().uts(zd, op.omega())?;
    let obs = op.system().observation();
    let g = op.aus().grid_count();
    let mut best = 0.0f64;
    for pt in 0..g {
        let mut v = T::zero();
        for (l, c) in obs.iter().enumerate() {
            v += *c * z0[pt + g * l];
        }
        best = best.max(v.as_f64().abs());
    }
    Ok(best)
}

fn check_layout<T: Real>(op: &VcfOperator<T>, options: &ContinuationOptions) -> Result<Layout> {
    options.validate(op.d())?;
    let layout = Layout {
        coeffs: op.coeff_len(),
        d: op.d(),
        parameter: options.parameter,
    };
    let expected = layout.unknowns() - 1 - layout.coeffs;
    if options.constraint_rows() != expected {
        return Err(Error::ConstraintMismatch {
            rows: options.constraint_rows(),
            unknowns: layout.unknowns(),
            expected,
        });
    }
    Ok(layout)
}

/// Newton solve at a fixed parameter value, starting from `guess`.
pub fn solve_at_parameter<T: Real>(
    base: &VcfOperator<T>,
    guess: &TorusPoint<T>,
    options: &ContinuationOptions,
) -> Result<(TorusPoint<T>, Correction<T>)> {
    let layout = check_layout(base, options)?;
    let solver = Solver {
        base,
        layout: layout.clone(),
        options,
        initial_omega: guess.omega.clone(),
    };
    let op = operator_at(base, &layout, &layout.pack(&guess.zd, &guess.omega, guess.p))?;
    let reference = PhaseReference::new(&op, &guess.zd, options)?;
    let y0 = layout.pack(&guess.zd, &guess.omega, guess.p);
    let corr = solver.newton(y0, &reference, &ClosingRow::FixedParameter(guess.p))?;
    Ok((layout.point(&corr.y), corr))
}

/// Moves `point` along its tangent to the parameter value `target` and
/// corrects there. Falls back to the point itself when it has no tangent.
pub fn solve_near<T: Real>(
    base: &VcfOperator<T>,
    point: &TorusPoint<T>,
    target: f64,
    options: &ContinuationOptions,
) -> Result<(TorusPoint<T>, Correction<T>)> {
    let layout = check_layout(base, options)?;
    let mut y = layout.pack(&point.zd, &point.omega, point.p);
    if let Some(t) = point.tangent.as_ref().filter(|t| t.len() == y.len()) {
        let tp = t[layout.parameter_index()].as_f64();
        if tp.abs() > 1e-12 {
            let delta = T::lit((target - point.p.as_f64()) / tp);
            for (yi, &ti) in y.iter_mut().zip(t) {
                *yi += delta * ti;
            }
        }
    }
    y[layout.parameter_index()] = T::lit(target);
    let mut guess = layout.point(&y);
    guess.p = T::lit(target);
    solve_at_parameter(base, &guess, options)
}

/// Newton on the hyperplane through `guess` orthogonal to `direction` (a
/// coefficient-space vector; frequencies and parameter are left free). This
/// keeps the component of the solution along `direction` fixed, e.g. the size
/// of a torus seeded from a Neimark-Sacker point. The returned point carries
/// the branch tangent, oriented along `direction`.
pub fn solve_on_plane<T: Real>(
    base: &VcfOperator<T>,
    guess: &TorusPoint<T>,
    direction: &[T],
    options: &ContinuationOptions,
) -> Result<(TorusPoint<T>, Correction<T>)> {
    let layout = check_layout(base, options)?;
    if direction.len() != layout.coeffs {
        return Err(Error::Shape(format!(
            "direction has {} entries, expected {}",
            direction.len(),
            layout.coeffs
        )));
    }
    let mut tangent = DVector::zeros(layout.unknowns());
    tangent.rows_mut(0, layout.coeffs).copy_from_slice(direction);
    let norm = tangent.norm();
    if !(norm > T::zero()) {
        return Err(Error::InvalidOptions("direction vanishes".into()));
    }
    tangent /= norm;
    let solver = Solver {
        base,
        layout: layout.clone(),
        options,
        initial_omega: guess.omega.clone(),
    };
    let y0 = layout.pack(&guess.zd, &guess.omega, guess.p);
    let op = operator_at(base, &layout, &y0)?;
    let reference = PhaseReference::new(&op, &guess.zd, options)?;
    let corr = solver.newton(
        y0.clone(),
        &reference,
        &ClosingRow::Orthogonal {
            tangent: tangent.clone(),
            predicted: y0,
        },
    )?;
    let mut point = layout.point(&corr.y);
    point.tangent = Some(solver.tangent(&corr.y, &reference, &tangent)?.iter().copied().collect());
    Ok((point, corr))
}

/// Traces a branch from `initial`, which is corrected at its parameter value first.
pub fn continue_branch<T: Real>(
    base: &VcfOperator<T>,
    initial: &TorusPoint<T>,
    options: &ContinuationOptions,
    monitor: Option<&mut dyn PointMonitor<T>>,
) -> Result<Branch<T>> {
    match continue_branch_partial(base, initial, options, monitor)? {
        (_, Some(stall)) => Err(stall),
        (branch, None) => Ok(branch),
    }
}

/// Like [`continue_branch`], but a stall returns the points computed so far
/// (with `StopReason::Stalled`) together with the `BranchStall` error.
pub fn continue_branch_partial<T: Real>(
    base: &VcfOperator<T>,
    initial: &TorusPoint<T>,
    options: &ContinuationOptions,
    mut monitor: Option<&mut dyn PointMonitor<T>>,
) -> Result<(Branch<T>, Option<Error>)> {
    let start = Instant::now();
    let layout = check_layout(base, options)?;
    let solver = Solver {
        base,
        layout: layout.clone(),
        options,
        initial_omega: initial.omega.clone(),
    };
    let in_range = |p: f64| p >= options.p_min && p <= options.p_max;
    if !in_range(initial.p.as_f64()) {
        return Err(Error::InvalidOptions(format!(
            "initial parameter {} lies outside [{}, {}]",
            initial.p, options.p_min, options.p_max
        )));
    }

    let given = initial
        .tangent
        .as_ref()
        .filter(|t| t.len() == layout.unknowns())
        .map(|t| DVector::from_column_slice(t));
    let (mut y, corr0, mut tangent, bootstrap_iters) = match given {
        // A stored tangent stays well posed at folds, where a fixed-parameter
        // nudge has no solution.
        Some(t0) => {
            let y0 = layout.pack(&initial.zd, &initial.omega, initial.p);
            let op = operator_at(base, &layout, &y0)?;
            let reference = PhaseReference::new(&op, &initial.zd, options)?;
            let closing = ClosingRow::Orthogonal {
                tangent: t0.clone(),
                predicted: y0.clone(),
            };
            let corr = solver.newton(y0, &reference, &closing)?;
            let t = solver.tangent(&corr.y, &reference, &t0)?;
            let t = if options.direction < 0.0 { -t } else { t };
            (corr.y.clone(), corr, t, 0)
        }
        None => {
            let (first, corr0) = solve_at_parameter(base, initial, options)?;
            let y = layout.pack(&first.zd, &first.omega, first.p);
            // secant bootstrap
            let p0 = first.p.as_f64();
            let dp = options.direction.signum() * options.step_min.max(1e-4 * p0.abs().max(1.0));
            let mut nudged = first.clone();
            nudged.p = T::lit(p0 + dp);
            if let Parameter::Frequency { index } = options.parameter {
                nudged.omega[index] = nudged.p;
            }
            let (second, corr1) = solve_at_parameter(base, &nudged, options)?;
            let y1 = layout.pack(&second.zd, &second.omega, second.p);
            let secant = (&y1 - &y).normalize();
            let op = operator_at(base, &layout, &y)?;
            let reference = PhaseReference::new(&op, &first.zd, options)?;
            let tangent = solver.tangent(&y, &reference, &secant)?;
            (y, corr0, tangent, corr1.iterations)
        }
    };
    let mut total_iters = corr0.iterations + bootstrap_iters;

    let mut points = Vec::new();
    let mut bifurcations = Vec::new();
    let mut record = |op: &VcfOperator<T>,
                      y: &DVector<T>,
                      tangent: &DVector<T>,
                      corr: &Correction<T>,
                      step: f64,
                      points: &mut Vec<BranchPoint<T>>,
                      bifurcations: &mut Vec<Bifurcation>|
     -> Result<()> {
        let mut point = layout.point(y);
        point.tangent = Some(tangent.iter().copied().collect());
        if let Some(m) = monitor.as_deref_mut() {
            let insp = m.inspect(op, &point)?;
            point.stability = insp.stability;
            if let (Some((kind, frac)), Some(prev)) = (insp.bifurcation, points.last()) {
                let p_prev = prev.point.p.as_f64();
                let p_now = point.p.as_f64();
                bifurcations.push(Bifurcation {
                    kind,
                    index: points.len(),
                    p: p_prev + frac.clamp(0.0, 1.0) * (p_now - p_prev),
                });
            }
        }
        let amp = amplitude(op, &point.zd)?;
        points.push(BranchPoint {
            point,
            amplitude: amp,
            residual_norm: *corr.history.last().unwrap_or(&0.0),
            newton_iterations: corr.iterations,
            step,
        });
        Ok(())
    };
    let op0 = operator_at(base, &layout, &y)?;
    record(&op0, &y, &tangent, &corr0, 0.0, &mut points, &mut bifurcations)?;

    let mut s = options.step;
    let mut failures = 0usize;
    let mut stall = None;
    let stop_reason = loop {
        if points.len() >= options.max_points {
            break StopReason::MaxPoints;
        }
        let op = operator_at(base, &layout, &y)?;
        let reference = PhaseReference::new(&op, &y.rows(0, layout.coeffs).iter().copied().collect::<Vec<_>>(), options)?;
        let predicted = &y + scaled_step(&tangent, &layout, options.normalization, T::lit(s));
        let closing = ClosingRow::Orthogonal {
            tangent: tangent.clone(),
            predicted: predicted.clone(),
        };
        let outcome = solver
            .newton(predicted.clone(), &reference, &closing)
            .and_then(|c| {
                let t = solver.tangent(&c.y, &reference, &tangent)?;
                Ok((c, t))
            })
            .and_then(|(c, t)| {
                if layout.omega(&c.y).iter().any(|w| *w <= T::zero()) {
                    return Err(Error::NumericalBlowup("non-positive frequency".into()));
                }
                let turn = t.dot(&tangent).as_f64() / (t.norm() * tangent.norm()).as_f64();
                if turn < options.min_tangent_cosine {
                    return Err(Error::StepRejected(format!("tangent turned to cosine {turn:.3}")));
                }
                if options.normalization == Normalization::Arclength {
                    let moved = (&c.y - &predicted).norm().as_f64();
                    if moved > options.max_correction_ratio * s {
                        return Err(Error::StepRejected(format!("corrector moved {moved:.3e} for step {s:.3e}")));
                    }
                }
                Ok((c, t))
            });
        match outcome {
            Ok((corr, t)) => {
                total_iters += corr.iterations;
                let p_new = layout.p(&corr.y).as_f64();
                if !in_range(p_new) {
                    break StopReason::ParameterBound;
                }
                y = corr.y.clone();
                tangent = t;
                let op = operator_at(base, &layout, &y)?;
                record(&op, &y, &tangent, &corr, s, &mut points, &mut bifurcations)?;
                if corr.iterations <= options.fast_iterations {
                    s = (s * options.step_grow).min(options.step_max);
                }
            }
            Err(e) => {
                failures += 1;
                debug!("correction failed at step {s:e}: {e}");
                s *= options.step_shrink;
                if s < options.step_min {
                    stall = Some(Error::BranchStall {
                        p: layout.p(&y).as_f64(),
                        reason: e.to_string(),
                    });
                    break StopReason::Stalled;
                }
            }
        }
    };

    let branch = Branch {
        points,
        bifurcations,
        total_newton_iterations: total_iters,
        failed_corrections: failures,
        wall_time_s: start.elapsed().as_secs_f64(),
        stop_reason,
    };
    Ok((branch, stall))
}
