//! Fixed-step time integration used as an independent reference for
//! synthesized tori.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::SecondOrderSystem;
use crate::scalar::Real;
use crate::vcf::{synthesize, VcfOperator};

/// Default integration steps per period of `ω₁`.
pub const STEPS_PER_PERIOD: usize = 500;
/// Default transient, in periods of `ω₁`.
pub const TRANSIENT_PERIODS: f64 = 200.0;

/// Samples of `x = [z; ż]` on a uniform grid `t_k = t0 + k·dt`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TiRun {
    pub t0: f64,
    pub dt: f64,
    pub omega: Vec<f64>,
    /// One row per sample, `2n` columns.
    pub states: DMatrix<f64>,
}

impl TiRun {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn n(&self) -> usize {
        self.states.ncols() / 2
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    /// Scalar signal `c·z(t_k)`.
    pub fn observe(&self, c: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|k| c.iter().enumerate().map(|(l, w)| w * self.states[(k, l)]).sum())
            .collect()
    }
}

struct Rhs<'a, T: Real> {
    system: &'a dyn SecondOrderSystem<T>,
    minv: DMatrix<T>,
    omega: Vec<T>,
    scale: T,
}

impl<T: Real> Rhs<'_, T> {
    fn eval(&self, t: f64, x: &[T], out: &mut [T]) {
        let n = self.system.n();
        let (z, v) = x.split_at(n);
        let tau: Vec<T> = self.omega.iter().map(|&w| T::lit((w.as_f64() * t) % TAU)).collect();
        let mut f = vec![T::zero(); n];
        let mut e = vec![T::zero(); n];
        self.system.force(z, v, &mut f);
        self.system.excitation(&tau, &self.omega, &mut e);
        let fe = DVector::from_iterator(n, f.iter().zip(&e).map(|(&f, &e)| f - self.scale * e));
        let rhs = -(self.system.damping() * DVector::from_column_slice(v)
            + self.system.stiffness() * DVector::from_column_slice(z)
            + self.system.theta() * fe);
        let acc = &self.minv * rhs;
        out[..n].copy_from_slice(v);
        out[n..].copy_from_slice(acc.as_slice());
    }
}

/// Classical fourth-order Runge-Kutta from `x0` at `t = 0` to `t_end`, keeping
/// the samples with `t ≥ record_from`. The excitation phases are `τ = ωt`.
pub fn integrate<T: Real>(
    system: &dyn SecondOrderSystem<T>,
    omega: &[T],
    excitation_scale: T,
    x0: &[T],
    t_end: f64,
    dt: f64,
    record_from: f64,
) -> Result<TiRun> {
    let n = system.n();
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidOptions("time step must be positive".into()));
    }
    if x0.len() != 2 * n {
        return Err(Error::Shape(format!("initial state has {} entries, expected {}", x0.len(), 2 * n)));
    }
    let minv = system.mass().clone().try_inverse().ok_or(Error::Singular("mass matrix"))?;
    let rhs = Rhs {
        system,
        minv,
        omega: omega.to_vec(),
        scale: excitation_scale,
    };
    let steps = (t_end / dt).round().max(0.0) as usize;
    let first = ((record_from / dt).ceil().max(0.0) as usize).min(steps + 1);
    let mut states = DMatrix::zeros(steps + 1 - first, 2 * n);
    let m = 2 * n;
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![T::zero(); m], vec![T::zero(); m], vec![T::zero(); m], vec![T::zero(); m]);
    let mut tmp = vec![T::zero(); m];
    let h = T::lit(dt);
    let half = T::lit(0.5 * dt);
    let sixth = T::lit(dt / 6.0);
    let two = T::lit(2.0);
    for step in 0..=steps {
        if step >= first {
            for (c, v) in x.iter().enumerate() {
                states[(step - first, c)] = v.as_f64();
            }
        }
        if step == steps {
            break;
        }
        let t = step as f64 * dt;
        rhs.eval(t, &x, &mut k1);
        for i in 0..m {
            tmp[i] = x[i] + half * k1[i];
        }
        rhs.eval(t + 0.5 * dt, &tmp, &mut k2);
        for i in 0..m {
            tmp[i] = x[i] + half * k2[i];
        }
        rhs.eval(t + 0.5 * dt, &tmp, &mut k3);
        for i in 0..m {
            tmp[i] = x[i] + h * k3[i];
        }
        rhs.eval(t + dt, &tmp, &mut k4);
        for i in 0..m {
            x[i] += sixth * (k1[i] + two * (k2[i] + k3[i]) + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Blowup(t + dt));
        }
    }
    Ok(TiRun {
        t0: first as f64 * dt,
        dt,
        omega: omega.iter().map(|w| w.as_f64()).collect(),
        states,
    })
}

/// Integrates from the torus state at `τ = 0` with the default step and
/// transient, recording `window_periods` periods of `ω₁`.
pub fn integrate_from_torus<T: Real>(op: &VcfOperator<T>, zd: &[T], window_periods: f64) -> Result<TiRun> {
    let omega = op.omega();
    let t1 = TAU / omega[0].as_f64();
    let s = op.synthesize(zd, &DMatrix::zeros(1, op.d()))?;
    let x0: Vec<T> = s.z.row(0).iter().chain(s.zdot.row(0).iter()).copied().collect();
    let transient = TRANSIENT_PERIODS * t1;
    integrate(
        op.system().as_ref(),
        omega,
        op.excitation_scale(),
        &x0,
        transient + window_periods * t1,
        t1 / STEPS_PER_PERIOD as f64,
        transient,
    )
}

const FLAT_TOP: [f64; 5] = [0.21557895, 0.41663158, 0.277263158, 0.083578947, 0.006947368];

/// One-sided amplitude spectrum with frequencies as multiples of `ω₁`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Spectrum {
    pub ratios: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub ratio: f64,
    pub amplitude: f64,
}

impl Spectrum {
    /// Spacing of the frequency bins in units of `ω₁`.
    pub fn resolution(&self) -> f64 {
        self.ratios.get(1).copied().unwrap_or(0.0)
    }

    /// Local maxima of at least `floor · max` that dominate a window of
    /// three bins on each side (the flat-top main lobe spans about five).
    pub fn peaks(&self, floor: f64) -> Vec<Peak> {
        let a = &self.amplitudes;
        let top = a.iter().copied().fold(0.0, f64::max);
        let w = 3;
        (0..a.len())
            .filter(|&k| {
                a[k] >= floor * top
                    && a[k] > 0.0
                    && (k.saturating_sub(w)..(k + w + 1).min(a.len())).all(|j| j == k || a[j] < a[k] || (a[j] == a[k] && j > k))
            })
            .map(|k| Peak {
                ratio: self.ratios[k],
                amplitude: a[k],
            })
            .collect()
    }
}

/// Flat-top windowed amplitude spectrum of uniformly sampled `signal`.
pub fn spectrum(signal: &[f64], dt: f64, omega1: f64) -> Spectrum {
    let n = signal.len();
    if n < 2 {
        return Spectrum {
            ratios: vec![0.0; n],
            amplitudes: signal.iter().map(|x| x.abs()).collect(),
        };
    }
    let window: Vec<f64> = (0..n)
        .map(|k| {
            let x = TAU * k as f64 / n as f64;
            FLAT_TOP[0] - FLAT_TOP[1] * x.cos() + FLAT_TOP[2] * (2.0 * x).cos() - FLAT_TOP[3] * (3.0 * x).cos()
                + FLAT_TOP[4] * (4.0 * x).cos()
        })
        .collect();
    let gain: f64 = window.iter().sum();
    let mut buf: Vec<Complex<f64>> = signal.iter().zip(&window).map(|(s, w)| Complex::new(s * w, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2 + 1;
    let df = TAU / (n as f64 * dt) / omega1;
    Spectrum {
        ratios: (0..half).map(|k| k as f64 * df).collect(),
        amplitudes: (0..half)
            .map(|k| {
                let scale = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
                scale * buf[k].norm() / gain
            })
            .collect(),
    }
}

/// Spectrum of the observed displacement of a run.
pub fn run_spectrum(run: &TiRun, observation: &[f64]) -> Spectrum {
    spectrum(&run.observe(observation), run.dt, run.omega[0])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeakMatch {
    pub ratio: f64,
    pub reference: f64,
    /// Amplitude of the matching peak, `None` when no peak lies within two bins.
    pub candidate: Option<f64>,
    pub relative_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    /// `‖z_TI − z_torus‖₂ / ‖z_TI‖₂` over the recorded window, all DOFs.
    pub relative_l2: f64,
    pub peaks: Vec<PeakMatch>,
    pub max_peak_error: f64,
}

/// Matches every reference peak of at least `floor · max` against the
/// candidate spectrum.
pub fn match_peaks(reference: &Spectrum, candidate: &Spectrum, floor: f64) -> Vec<PeakMatch> {
    let cand = candidate.peaks(0.0);
    let tol = 2.0 * reference.resolution().max(candidate.resolution());
    reference
        .peaks(floor)
        .into_iter()
        .map(|p| {
            let hit = cand
                .iter()
                .filter(|c| (c.ratio - p.ratio).abs() <= tol)
                .min_by(|a, b| (a.ratio - p.ratio).abs().total_cmp(&(b.ratio - p.ratio).abs()));
            PeakMatch {
                ratio: p.ratio,
                reference: p.amplitude,
                candidate: hit.map(|c| c.amplitude),
                relative_error: hit.map_or(f64::INFINITY, |c| (c.amplitude - p.amplitude).abs() / p.amplitude),
            }
        })
        .collect()
}

/// The torus states sampled at the times of `like`, along `τ = ωt`.
pub fn synthesized_run<T: Real>(op: &VcfOperator<T>, zd: &[T], like: &TiRun) -> Result<TiRun> {
    let n = op.n();
    let omega: Vec<f64> = op.omega().iter().map(|w| w.as_f64()).collect();
    let taus = DMatrix::from_fn(like.len(), op.d(), |k, i| (omega[i] * like.time(k)) % TAU);
    let syn = synthesize(op.specs(), n, zd, op.omega(), &taus)?;
    let states = DMatrix::from_fn(like.len(), 2 * n, |k, c| {
        if c < n {
            syn.z[(k, c)].as_f64()
        } else {
            syn.zdot[(k, c - n)].as_f64()
        }
    });
    Ok(TiRun {
        t0: like.t0,
        dt: like.dt,
        omega,
        states,
    })
}

/// Displacement-wise comparison of two runs on the same time grid, plus the
/// peaks of their observed spectra.
pub fn compare_runs(reference: &TiRun, candidate: &TiRun, observation: &[f64], peak_floor: f64) -> Result<Comparison> {
    let n = reference.n();
    if candidate.n() != n || candidate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "runs differ: {}×{} DOFs vs {}×{}",
            reference.len(),
            n,
            candidate.len(),
            candidate.n()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..reference.len() {
        for l in 0..n {
            let a = reference.states[(k, l)];
            let b = candidate.states[(k, l)];
            num += (a - b) * (a - b);
            den += a * a;
        }
    }
    let peaks = match_peaks(
        &run_spectrum(reference, observation),
        &run_spectrum(candidate, observation),
        peak_floor,
    );
    let max_peak_error = peaks.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    Ok(Comparison {
        relative_l2: if den > 0.0 { (num / den).sqrt() } else { num.sqrt() },
        peaks,
        max_peak_error,
    })
}

/// Compares a run with the torus synthesized along `τ = ωt`, sample by
/// sample and through the peaks of the observed displacement spectra.
pub fn compare<T: Real>(op: &VcfOperator<T>, zd: &[T], run: &TiRun, peak_floor: f64) -> Result<Comparison> {
    if run.n() != op.n() {
        return Err(Error::Shape(format!("run has {} DOFs, torus has {}", run.n(), op.n())));
    }
    let syn = synthesized_run(op, zd, run)?;
    let c: Vec<f64> = op.system().observation().iter().map(|x| x.as_f64()).collect();
    compare_runs(run, &syn, &c, peak_floor)
}
