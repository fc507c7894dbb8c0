//! Config-driven runs: continuation sweeps, stability passes, NS hand-offs
//! and time-integration comparisons, each writing plain files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use qptorus::basis::BasisSpec;
use qptorus::continuation::{
    continue_branch_partial, solve_near, solve_on_plane, Bifurcation, BifurcationKind, ContinuationOptions, Parameter, PointMonitor,
    StopReason,
};
use qptorus::models::{Beam, BeamParams, DuffingParams, DuffingVdp, LinearSystem, Pipe, PipeParams, SecondOrderSystem};
use qptorus::oracle::{self, Comparison, Spectrum};
use qptorus::stability::{
    lyapunov_exponents, ns_torus_init, FloquetMonitor, LyapunovOptions, NsSeed, ReportKind, StabilityReport,
    FLOQUET_TOL,
};
use qptorus::vcf::{Stability, TorusPoint, VcfOperator};
use qptorus::{Branch, Error as EngineError, Operator};

pub const CONFIG_SCHEMA: &str = "qptorus.run/1";
pub const BRANCH_SCHEMA: &str = "qptorus.branch/1";
pub const CSV_SCHEMA: &str = "qptorus.branch.csv/1";
pub const STABILITY_CSV_SCHEMA: &str = "qptorus.stability.csv/1";
pub const SUMMARY_SCHEMA: &str = "qptorus.summary/1";
pub const SEED_SCHEMA: &str = "qptorus.seed/1";
pub const METRICS_SCHEMA: &str = "qptorus.compare/1";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl CliError {
    /// Process exit code: 2 config, 3 stall, 4 not an NS point, 5 blow-up, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Engine(e) => match e {
                EngineError::BranchStall { .. } => 3,
                EngineError::NotAnNsPoint(_) => 4,
                EngineError::Blowup(_) => 5,
                EngineError::InvalidModel(_) | EngineError::InvalidOptions(_) | EngineError::InvalidBasis(_) => 2,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(m: impl Into<String>) -> CliError {
    CliError::Config(m.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    DuffingVdp(DuffingParams),
    Beam(BeamParams),
    Pipe(PipeParams),
    /// `ẍ + 2ζω₀ẋ + ω₀²x = f cos τ₁`.
    LinearOscillator { omega0: f64, zeta: f64, forcing: f64 },
}

impl ModelConfig {
    pub fn build(&self) -> CliResult<Arc<dyn SecondOrderSystem<f64>>> {
        Ok(match self {
            ModelConfig::DuffingVdp(p) => Arc::new(DuffingVdp::new(p)?),
            ModelConfig::Beam(p) => Arc::new(Beam::new(p)?),
            ModelConfig::Pipe(p) => Arc::new(Pipe::new(p)?),
            ModelConfig::LinearOscillator { omega0, zeta, forcing } => {
                Arc::new(LinearSystem::oscillator(*omega0, *zeta, Some(*forcing)))
            }
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeedSource {
    /// All coefficients zero.
    #[default]
    Zero,
    /// Solution of the linear part `K^d Z = Θ^d E^d`.
    Linear,
    /// A seed file written by `ns-init` (or any file with the same layout).
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    /// Floquet multipliers on periodic (d = 1) points during `continue`.
    pub floquet: bool,
    /// Exponential factors per period for monodromy matrices.
    pub n_m: usize,
    /// Unit-circle tolerance for Floquet verdicts.
    pub tol: f64,
    /// Lyapunov settings for tori (d ≥ 2) in `stability`.
    pub lyapunov: LyapunovOptions,
    /// Write the running exponent estimates of every point.
    pub write_histories: bool,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            floquet: true,
            n_m: 256,
            tol: FLOQUET_TOL,
            lyapunov: LyapunovOptions::default(),
            write_histories: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NsInitConfig {
    /// Bases of the d = 2 torus; defaults to the periodic basis in both dimensions.
    pub bases: Option<Vec<BasisSpec>>,
    /// Largest `||μ| − 1|` accepted for the critical pair.
    pub tol: f64,
    /// Move along the branch tangent to the interpolated crossing before seeding.
    pub refine: bool,
}

impl Default for NsInitConfig {
    fn default() -> Self {
        Self {
            bases: None,
            tol: 0.05,
            refine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Recorded window after the transient, in periods of `ω₁`.
    pub window_periods: f64,
    /// Relative floor of the reference peaks that must be matched.
    pub peak_floor: f64,
    /// Compare the synthesized torus with itself instead of a time integration.
    pub self_compare: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            window_periods: 200.0,
            peak_floor: 0.01,
            self_compare: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for every output file, relative to the config file.
    pub dir: PathBuf,
    /// Stem of the branch files.
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub model: ModelConfig,
    pub bases: Vec<BasisSpec>,
    /// Initial base frequencies; taken from the seed file when omitted.
    #[serde(default)]
    pub omega: Option<Vec<f64>>,
    /// Initial parameter value; defaults to the continued frequency or to 1.
    #[serde(default)]
    pub parameter_start: Option<f64>,
    #[serde(default)]
    pub continuation: ContinuationOptions,
    #[serde(default)]
    pub stability: StabilityConfig,
    #[serde(default)]
    pub ns_init: NsInitConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub seed: SeedSource,
    pub output: OutputConfig,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(config_err(format!("schema {:?}, expected {CONFIG_SCHEMA:?}", self.schema)));
        }
        if self.bases.is_empty() {
            return Err(config_err("at least one basis is required"));
        }
        for b in &self.bases {
            b.validate().map_err(|e| config_err(e.to_string()))?;
        }
        let d = self.bases.len();
        if let Some(w) = &self.omega {
            if w.len() != d {
                return Err(config_err(format!("{} frequencies for {d} bases", w.len())));
            }
        }
        if self.omega.is_none() && !matches!(self.seed, SeedSource::File { .. }) {
            return Err(config_err("omega is required unless the seed comes from a file"));
        }
        if let SeedSource::File { path } = &self.seed {
            let p = self.resolve(path);
            if !p.is_file() {
                return Err(config_err(format!("seed file {} does not exist", p.display())));
            }
        }
        self.continuation.validate(d).map_err(|e| config_err(e.to_string()))?;
        if self.stability.n_m == 0 || !(self.stability.tol > 0.0) {
            return Err(config_err("stability.n_m and stability.tol must be positive"));
        }
        if self.output.name.is_empty() {
            return Err(config_err("output.name is empty"));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self, suffix: &str) -> PathBuf {
        self.resolve(&self.output.dir).join(format!("{}{suffix}", self.output.name))
    }

    pub fn operator(&self, omega: &[f64]) -> CliResult<Operator> {
        Ok(VcfOperator::assemble(self.model.build()?, &self.bases, omega)?)
    }
}

/// Everything needed to reuse a branch: bases, parameter and all points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BranchFile {
    pub schema: String,
    pub bases: Vec<BasisSpec>,
    pub parameter: Parameter,
    pub branch: Branch,
}

impl BranchFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let file: BranchFile =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if file.schema != BRANCH_SCHEMA {
            return Err(config_err(format!("branch schema {:?}, expected {BRANCH_SCHEMA:?}", file.schema)));
        }
        Ok(file)
    }

    fn point(&self, idx: usize) -> CliResult<&TorusPoint<f64>> {
        self.branch
            .points
            .get(idx)
            .map(|bp| &bp.point)
            .ok_or_else(|| config_err(format!("point {idx} not in branch of {} points", self.branch.points.len())))
    }
}

/// A starting point for `continue`, optionally with its NS provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedFile {
    pub schema: String,
    #[serde(flatten)]
    pub seed: NsSeed<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub model: String,
    pub d: usize,
    pub bases: Vec<String>,
    pub unknowns: usize,
    pub points: usize,
    pub total_newton_iterations: usize,
    pub failed_corrections: usize,
    pub total_time_s: f64,
    pub time_per_point_s: f64,
    pub stop_reason: StopReason,
    pub bifurcations: Vec<Bifurcation>,
    /// Newton iterations spent correcting an NS seed, if one was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_iterations: Option<usize>,
}

/// Seventeen significant digits, enough to round-trip an `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable output");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// CSV with a leading `# schema` comment line.
fn write_csv(path: &Path, schema: &str, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# {schema}").expect("in-memory write");
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let csv_err = |e: csv::Error| config_err(format!("{}: {e}", path.display()));
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush().map_err(io_err(path))?;
    }
    write_file(path, &buf)
}

fn tag_at(bifurcations: &[Bifurcation], idx: usize) -> String {
    bifurcations
        .iter()
        .filter(|b| b.index == idx)
        .map(|b| b.kind.tag())
        .collect::<Vec<_>>()
        .join("+")
}

fn stability_name(s: Stability) -> &'static str {
    match s {
        Stability::Stable => "stable",
        Stability::Unstable => "unstable",
        Stability::Unknown => "unknown",
    }
}

pub fn branch_csv_header(d: usize) -> Vec<String> {
    let mut h = vec!["index".to_string(), "p".to_string()];
    h.extend((1..=d).map(|i| format!("omega_{i}")));
    h.extend(
        ["amplitude", "residual_norm", "newton_iterations", "step", "stability", "bifurcation"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

fn branch_csv_rows(branch: &Branch) -> Vec<Vec<String>> {
    branch
        .points
        .iter()
        .enumerate()
        .map(|(i, bp)| {
            let mut r = vec![i.to_string(), fmt_f64(bp.point.p)];
            r.extend(bp.point.omega.iter().map(|&w| fmt_f64(w)));
            r.push(fmt_f64(bp.amplitude));
            r.push(fmt_f64(bp.residual_norm));
            r.push(bp.newton_iterations.to_string());
            r.push(fmt_f64(bp.step));
            r.push(stability_name(bp.point.stability).to_string());
            r.push(tag_at(&branch.bifurcations, i));
            r
        })
        .collect()
}

fn linear_seed(op: &Operator) -> CliResult<Vec<f64>> {
    let rhs = op.thetad() * op.excitation_coeffs();
    let z = qptorus::scalar::lu_solve_vec(op.kd(), &rhs).ok_or(EngineError::Singular("linear seed"))?;
    Ok(z.iter().copied().collect())
}

/// Starting point plus, for NS seeds, the direction whose component is held
/// fixed while the seed is corrected.
fn initial_point(cfg: &RunConfig) -> CliResult<(TorusPoint<f64>, Option<Vec<f64>>)> {
    let d = cfg.bases.len();
    let mut direction = None;
    let (zd, omega, seed_p) = match &cfg.seed {
        SeedSource::File { path } => {
            let path = cfg.resolve(path);
            let text = fs::read_to_string(&path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            let seed: SeedFile =
                serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            if seed.schema != SEED_SCHEMA {
                return Err(config_err(format!("seed schema {:?}, expected {SEED_SCHEMA:?}", seed.schema)));
            }
            if seed.seed.specs != cfg.bases {
                return Err(config_err("seed bases differ from the config bases"));
            }
            let omega = cfg.omega.clone().unwrap_or_else(|| seed.seed.point.omega.clone());
            if seed.seed.epsilon != 0.0 && !seed.seed.direction.is_empty() {
                direction = Some(seed.seed.direction);
            }
            (seed.seed.point.zd, omega, Some(seed.seed.point.p))
        }
        SeedSource::Zero | SeedSource::Linear => {
            let omega = cfg.omega.clone().expect("validated");
            let op = cfg.operator(&omega)?;
            let zd = if cfg.seed == SeedSource::Linear {
                linear_seed(&op)?
            } else {
                vec![0.0; op.coeff_len()]
            };
            (zd, omega, None)
        }
    };
    if omega.len() != d {
        return Err(config_err(format!("{} seed frequencies for {d} bases", omega.len())));
    }
    let p = match (cfg.parameter_start, cfg.continuation.parameter) {
        (Some(p), _) => p,
        (None, Parameter::Frequency { index }) => {
            *omega.get(index).ok_or_else(|| config_err(format!("parameter frequency {index} out of range")))?
        }
        (None, Parameter::ExcitationScale) => seed_p.unwrap_or(1.0),
    };
    Ok((TorusPoint::new(zd, omega, p), direction))
}

/// Operator matching a stored point, including the excitation scale.
fn operator_for(base: &Operator, parameter: Parameter, point: &TorusPoint<f64>) -> CliResult<Operator> {
    let op = base.at_omega(&point.omega)?;
    Ok(match parameter {
        Parameter::ExcitationScale => op.with_excitation_scale(point.p),
        Parameter::Frequency { .. } => op,
    })
}

fn branch_stem(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    PathBuf::from(s.strip_suffix(".branch.json").unwrap_or(&s).to_string())
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", stem.display()))
}

/// Paths written by [`cmd_continue`].
#[derive(Clone, Debug)]
pub struct ContinueOutputs {
    pub csv: PathBuf,
    pub branch: PathBuf,
    pub summary: PathBuf,
    pub result: RunSummary,
}

/// Continues the configured branch and writes `<name>.csv`,
/// `<name>.branch.json` and `<name>.summary.json`. On a stall the partial
/// branch is written before the error is returned.
pub fn cmd_continue(cfg: &RunConfig) -> CliResult<ContinueOutputs> {
    let started = Instant::now();
    let (mut init, direction) = initial_point(cfg)?;
    let op = cfg.operator(&init.omega)?;
    let mut seed_iterations = None;
    if let Some(dir) = direction {
        // Holding the seed's offset along the torus direction keeps Newton
        // from collapsing onto the embedded periodic solution.
        let (corrected, corr) = solve_on_plane(&op, &init, &dir, &cfg.continuation)?;
        info!("seed corrected in {} iterations to p = {}", corr.iterations, corrected.p);
        seed_iterations = Some(corr.iterations);
        init = corrected;
    }
    let mut floquet = FloquetMonitor::new(cfg.stability.n_m, cfg.stability.tol);
    let monitor: Option<&mut dyn PointMonitor<f64>> =
        if cfg.stability.floquet && op.d() == 1 { Some(&mut floquet) } else { None };
    info!(
        "continuing {} unknowns from p = {} over [{}, {}]",
        op.unknown_count(),
        init.p,
        cfg.continuation.p_min,
        cfg.continuation.p_max
    );
    let (branch, stall) = continue_branch_partial(&op, &init, &cfg.continuation, monitor)?;
    let total = started.elapsed().as_secs_f64();
    let summary = RunSummary {
        schema: SUMMARY_SCHEMA.into(),
        model: op.system().name().to_string(),
        d: op.d(),
        bases: cfg.bases.iter().map(|b| b.kind_name().to_string()).collect(),
        unknowns: op.unknown_count(),
        points: branch.points.len(),
        total_newton_iterations: branch.total_newton_iterations,
        failed_corrections: branch.failed_corrections,
        total_time_s: total,
        time_per_point_s: total / branch.points.len().max(1) as f64,
        stop_reason: branch.stop_reason,
        bifurcations: branch.bifurcations.clone(),
        seed_iterations,
    };
    let out = ContinueOutputs {
        csv: cfg.output_path(".csv"),
        branch: cfg.output_path(".branch.json"),
        summary: cfg.output_path(".summary.json"),
        result: summary,
    };
    write_csv(&out.csv, CSV_SCHEMA, &branch_csv_header(op.d()), &branch_csv_rows(&branch))?;
    write_json(
        &out.branch,
        &BranchFile {
            schema: BRANCH_SCHEMA.into(),
            bases: cfg.bases.clone(),
            parameter: cfg.continuation.parameter,
            branch,
        },
    )?;
    write_json(&out.summary, &out.result)?;
    info!("{} points, {} Newton iterations, {total:.2} s", out.result.points, out.result.total_newton_iterations);
    match stall {
        Some(e) => Err(e.into()),
        None => Ok(out),
    }
}

fn check_bases(cfg: &RunConfig, file: &BranchFile) -> CliResult<()> {
    if file.bases != cfg.bases {
        return Err(config_err("branch bases differ from the config bases"));
    }
    Ok(())
}

/// Paths written by [`cmd_stability`].
#[derive(Clone, Debug)]
pub struct StabilityOutputs {
    pub csv: PathBuf,
    pub reports: PathBuf,
    pub histories: Vec<PathBuf>,
    pub verdicts: Vec<Stability>,
    pub bifurcations: Vec<Bifurcation>,
}

/// Floquet analysis of a periodic branch or Lyapunov analysis of a torus
/// branch, written as `<stem>.stability.csv` and `<stem>.stability.json`.
pub fn cmd_stability(cfg: &RunConfig, branch_path: &Path) -> CliResult<StabilityOutputs> {
    let file = BranchFile::load(branch_path)?;
    check_bases(cfg, &file)?;
    if file.branch.points.is_empty() {
        return Err(config_err("branch has no points"));
    }
    let stem = branch_stem(branch_path);
    let first = file.point(0)?;
    let base = cfg.operator(&first.omega)?;
    let d = base.d();
    let mut reports = Vec::with_capacity(file.branch.points.len());
    let mut bifurcations = Vec::new();
    if d == 1 {
        let mut mon = FloquetMonitor::new(cfg.stability.n_m, cfg.stability.tol);
        let mut prev_p = None;
        for (i, bp) in file.branch.points.iter().enumerate() {
            let op = operator_for(&base, file.parameter, &bp.point)?;
            let insp = mon.inspect(&op, &bp.point)?;
            if let (Some((kind, frac)), Some(p0)) = (insp.bifurcation, prev_p) {
                bifurcations.push(Bifurcation {
                    kind,
                    index: i,
                    p: p0 + frac.clamp(0.0, 1.0) * (bp.point.p - p0),
                });
            }
            prev_p = Some(bp.point.p);
        }
        reports = mon.reports;
    } else {
        for (i, bp) in file.branch.points.iter().enumerate() {
            let op = operator_for(&base, file.parameter, &bp.point)?;
            let l = lyapunov_exponents(&op, &bp.point.zd, &cfg.stability.lyapunov)?;
            info!(
                "point {i}: max exponent {:.3e}, settled {}",
                l.exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                l.settled
            );
            reports.push(StabilityReport::lyapunov(&l));
        }
    }

    let mut header = vec!["index".to_string(), "p".to_string()];
    header.extend((1..=d).map(|i| format!("omega_{i}")));
    header.extend(
        ["amplitude", "stability", "indicator", "bifurcation"]
            .iter()
            .map(|s| s.to_string()),
    );
    let rows: Vec<Vec<String>> = file
        .branch
        .points
        .iter()
        .zip(&reports)
        .enumerate()
        .map(|(i, (bp, rep))| {
            let mut r = vec![i.to_string(), fmt_f64(bp.point.p)];
            r.extend(bp.point.omega.iter().map(|&w| fmt_f64(w)));
            r.push(fmt_f64(bp.amplitude));
            r.push(stability_name(rep.verdict).to_string());
            r.push(fmt_f64(indicator(rep)));
            r.push(tag_at(&bifurcations, i));
            r
        })
        .collect();
    let csv_path = with_suffix(&stem, ".stability.csv");
    write_csv(&csv_path, STABILITY_CSV_SCHEMA, &header, &rows)?;

    let mut histories = Vec::new();
    if cfg.stability.write_histories && d > 1 {
        for (i, rep) in reports.iter().enumerate() {
            let k = rep.exponents.len();
            let mut h = vec!["map".to_string()];
            h.extend((1..=k).map(|j| format!("lambda_{j}")));
            let rows: Vec<Vec<String>> = rep
                .history
                .iter()
                .enumerate()
                .map(|(m, row)| std::iter::once((m + 1).to_string()).chain(row.iter().map(|&x| fmt_f64(x))).collect())
                .collect();
            let path = with_suffix(&stem, &format!(".history_{i}.csv"));
            write_csv(&path, "qptorus.history.csv/1", &h, &rows)?;
            histories.push(path);
        }
    }
    let slim: Vec<StabilityReport> = reports
        .iter()
        .map(|r| StabilityReport {
            history: Vec::new(),
            ..r.clone()
        })
        .collect();
    let json_path = with_suffix(&stem, ".stability.json");
    write_json(&json_path, &slim)?;
    Ok(StabilityOutputs {
        csv: csv_path,
        reports: json_path,
        histories,
        verdicts: reports.iter().map(|r| r.verdict).collect(),
        bifurcations,
    })
}

/// Largest multiplier modulus (Floquet) or largest exponent (Lyapunov).
pub fn indicator(rep: &StabilityReport) -> f64 {
    match rep.kind {
        ReportKind::Floquet => rep.multipliers.iter().map(|m| m[0].hypot(m[1])).fold(0.0, f64::max),
        ReportKind::Lyapunov => rep.exponents.iter().copied().fold(f64::NAN, f64::max),
    }
}

/// Seeds a d = 2 torus at an NS-tagged point and writes
/// `<stem>.ns_<idx>.seed.json`.
pub fn cmd_ns_init(cfg: &RunConfig, branch_path: &Path, idx: usize, epsilon: f64) -> CliResult<(PathBuf, SeedFile)> {
    if !epsilon.is_finite() {
        return Err(config_err("epsilon must be finite"));
    }
    let file = BranchFile::load(branch_path)?;
    check_bases(cfg, &file)?;
    if cfg.bases.len() != 1 {
        return Err(config_err("ns-init needs the config of a periodic (d = 1) run"));
    }
    let point = file.point(idx)?;
    let tag = file
        .branch
        .bifurcations
        .iter()
        .filter(|b| b.kind == BifurcationKind::NeimarkSacker && (b.index == idx || b.index == idx + 1))
        .min_by(|a, b| (a.p - point.p).abs().total_cmp(&(b.p - point.p).abs()))
        .ok_or_else(|| EngineError::NotAnNsPoint(format!("point {idx} carries no NS tag")))?;
    let base = cfg.operator(&point.omega)?;
    let mut at = point.clone();
    if cfg.ns_init.refine && at.tangent.is_some() && file.parameter == cfg.continuation.parameter {
        let (refined, corr) = solve_near(&base, &at, tag.p, &cfg.continuation)?;
        info!("refined to p = {} in {} iterations", refined.p, corr.iterations);
        at = refined;
    }
    let op = operator_for(&base, file.parameter, &at)?;
    let specs2 = cfg.ns_init.bases.clone().unwrap_or_else(|| vec![cfg.bases[0].clone(); 2]);
    let mut seed = ns_torus_init(&op, &at.zd, &specs2, cfg.stability.n_m, epsilon, cfg.ns_init.tol)?;
    seed.point.p = at.p;
    let out = SeedFile {
        schema: SEED_SCHEMA.into(),
        seed,
    };
    let path = with_suffix(&branch_stem(branch_path), &format!(".ns_{idx}.seed.json"));
    write_json(&path, &out)?;
    Ok((path, out))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareMetrics {
    pub schema: String,
    pub index: usize,
    pub p: f64,
    pub omega: Vec<f64>,
    pub self_compare: bool,
    pub samples: usize,
    pub dt: f64,
    #[serde(flatten)]
    pub comparison: Comparison,
}

fn write_spectrum(path: &Path, s: &Spectrum) -> CliResult<()> {
    let header = vec!["ratio".to_string(), "amplitude".to_string()];
    let rows: Vec<Vec<String>> = s
        .ratios
        .iter()
        .zip(&s.amplitudes)
        .map(|(r, a)| vec![fmt_f64(*r), fmt_f64(*a)])
        .collect();
    write_csv(path, "qptorus.spectrum.csv/1", &header, &rows)
}

/// Time integration from the torus state at `τ = 0` compared with the
/// synthesized torus; writes metrics JSON and both spectra.
pub fn cmd_compare(cfg: &RunConfig, branch_path: &Path, idx: usize) -> CliResult<(PathBuf, CompareMetrics)> {
    let file = BranchFile::load(branch_path)?;
    check_bases(cfg, &file)?;
    let point = file.point(idx)?;
    let base = cfg.operator(&point.omega)?;
    let op = operator_for(&base, file.parameter, point)?;
    let run = oracle::integrate_from_torus(&op, &point.zd, cfg.compare.window_periods)?;
    let syn = oracle::synthesized_run(&op, &point.zd, &run)?;
    let reference = if cfg.compare.self_compare { &syn } else { &run };
    let obs: Vec<f64> = op.system().observation().iter().copied().collect();
    let comparison = oracle::compare_runs(reference, &syn, &obs, cfg.compare.peak_floor)?;
    let stem = branch_stem(branch_path);
    write_spectrum(
        &with_suffix(&stem, &format!(".compare_{idx}.reference.csv")),
        &oracle::run_spectrum(reference, &obs),
    )?;
    write_spectrum(
        &with_suffix(&stem, &format!(".compare_{idx}.torus.csv")),
        &oracle::run_spectrum(&syn, &obs),
    )?;
    let metrics = CompareMetrics {
        schema: METRICS_SCHEMA.into(),
        index: idx,
        p: point.p,
        omega: point.omega.clone(),
        self_compare: cfg.compare.self_compare,
        samples: run.len(),
        dt: run.dt,
        comparison,
    };
    let path = with_suffix(&stem, &format!(".compare_{idx}.json"));
    write_json(&path, &metrics)?;
    Ok((path, metrics))
}
