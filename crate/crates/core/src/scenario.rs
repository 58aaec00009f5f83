//! Scenario files, the run pipeline behind the CLI, and the JSON report.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::analysis::{chain_residual, fit_log_slope, lyapunov_series, lyapunov_weights, metrics, safety_report, SafetyReport};
use crate::barrier::{build_structural_transform, select_kappas, BarrierConfig, BarrierSpec, CbfChain};
use crate::controller::{find_tm_nominal, select_m_adaptive, select_m_nominal, ControlMode, Controller, ControllerConfig, TmMonitor};
use crate::error::{Error, Result};
use crate::identifier::{Certificate, Estimator, IdentifierConfig};
use crate::kernels::{kernel_residuals, KernelResiduals, KernelTables};
use crate::plant::{init_state, validate_params, Grid, ParamBox, PlantParams, SimState};
use crate::series::{fourier_coeffs, CoeffKind};
use crate::sim::{run_controller, TrajectoryLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    /// Rows of A.
    pub a: Vec<Vec<f64>>,
    pub b: f64,
    pub eps: f64,
    pub lambda: f64,
    pub theta_box: ParamBox,
}

/// Initial PDE profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialProfile {
    Zero,
    /// x^power sin(waves pi x)
    PolySine {
        power: i32,
        waves: f64,
    },
    /// Values on the plant grid.
    Samples {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub u0: InitialProfile,
    pub y0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSection {
    pub family: BarrierFamily,
    /// Envelope amplitude and decay rate (exp_envelope only).
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub d: Option<f64>,
    pub t_a: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierFamily {
    Output,
    ExpEnvelope,
}

impl BarrierSection {
    pub fn config(&self) -> Result<BarrierConfig> {
        match (self.family, self.a, self.d) {
            (BarrierFamily::Output, None, None) => Ok(BarrierConfig::Output),
            (BarrierFamily::Output, _, _) => Err(Error::Config("barrier: output family takes no a or d".into())),
            (BarrierFamily::ExpEnvelope, Some(a), Some(d)) => Ok(BarrierConfig::ExpEnvelope { a, d }),
            (BarrierFamily::ExpEnvelope, _, _) => Err(Error::Config("barrier: exp_envelope needs a and d".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expectation {
    /// Starts safe and stays safe, states decay.
    Safe,
    /// Starts unsafe, returns to the safe set before t_a and stays there.
    Recover,
    /// Open loop: the PDE norm grows.
    Unstable,
}

/// Optional checks added on top of the expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ChecksConfig {
    /// Allowed recovery-time interval.
    #[serde(default)]
    pub recovery_window: Option<[f64; 2]>,
    /// Final (||u|| + ||u_x|| + |Y|) over its peak must fall below this.
    #[serde(default)]
    pub decay_ratio: Option<f64>,
    /// Relative error allowed on the first estimate.
    #[serde(default)]
    pub identification_tol: Option<f64>,
    /// Fitted slope of ln V must not exceed this.
    #[serde(default)]
    pub lyapunov_slope_max: Option<f64>,
    /// Start of the window used for the slope fit.
    #[serde(default)]
    pub lyapunov_fit_from: Option<f64>,
    /// Open loop: growth of ||u|| checked from this time on.
    #[serde(default)]
    pub growth_from: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub expect: Expectation,
    pub plant: PlantConfig,
    pub initial: InitialConfig,
    pub grid: Grid,
    pub barrier: BarrierSection,
    pub controller: ControllerConfig,
    #[serde(default)]
    pub identifier: Option<IdentifierConfig>,
    #[serde(default)]
    pub checks: ChecksConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Reads a TOML (or, by extension, JSON) scenario.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let parsed =
        if path.extension().is_some_and(|e| e == "json") { Scenario::from_json_str(&text) } else { Scenario::from_toml_str(&text) };
    parsed.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Everything derived from a scenario before stepping.
pub struct Prepared {
    pub params: PlantParams,
    pub grid: Grid,
    pub spec: BarrierSpec,
    pub chain: CbfChain,
    pub c: f64,
    pub s0: SimState,
    pub steps_per_period: Option<usize>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Scenario> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Scenario> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn plant_params(&self) -> Result<PlantParams> {
        let n = self.plant.a.len();
        if n == 0 || self.plant.a.iter().any(|r| r.len() != n) {
            return Err(Error::Config("plant.a must be a non-empty square matrix".into()));
        }
        let flat: Vec<f64> = self.plant.a.iter().flatten().copied().collect();
        validate_params(PlantParams {
            a: DMatrix::from_row_slice(n, n, &flat),
            b: self.plant.b,
            eps: self.plant.eps,
            lambda: self.plant.lambda,
            theta_box: self.plant.theta_box,
        })
    }

    /// Validates the whole configuration; no stepping happens here.
    pub fn prepare(&self) -> Result<Prepared> {
        let params = self.plant_params()?;
        let grid = Grid::new(self.grid.nx, self.grid.dt, self.grid.t_final, params.eps)?;
        let steps_per_period = match (&self.controller.mode, &self.identifier) {
            (ControlMode::Adaptive, None) => {
                return Err(Error::Config("adaptive mode needs an [identifier] section".into()));
            }
            (_, Some(id)) => {
                if !(id.period > 0.0) || id.window_periods == 0 {
                    return Err(Error::Config("identifier period and window must be positive".into()));
                }
                Some(grid.steps_per(id.period).map_err(|e| Error::Config(e.to_string()))?)
            }
            _ => None,
        };
        let n = params.n();
        let xs = grid.xs();
        let u: Vec<f64> = match &self.initial.u0 {
            InitialProfile::Zero => vec![0.0; xs.len()],
            InitialProfile::PolySine { power, waves } => xs.iter().map(|x| x.powi(*power) * (waves * PI * x).sin()).collect(),
            InitialProfile::Samples { values } => {
                if values.len() != xs.len() {
                    return Err(Error::Config(format!("initial.u0 has {} samples, grid has {}", values.len(), xs.len())));
                }
                values.clone()
            }
        };
        let s0 = init_state(&grid, |x| u[(x * grid.nx as f64).round() as usize], &self.initial.y0, n)?;
        let spec = BarrierSpec::from_config(&self.barrier.config()?, self.barrier.t_a, self.barrier.beta)?;
        let transform = build_structural_transform(&params.a, params.b)?;
        let z0 = transform.z_of(&s0.y);
        let c = match (self.controller.c, &self.controller.kappas) {
            (Some(c), _) => c,
            (None, Some(k)) if !k.is_empty() => k[k.len() - 1],
            _ => return Err(Error::Config("controller needs c or kappas".into())),
        };
        let kappas = select_kappas(&spec, &z0, c, self.controller.kappas.as_deref())?;
        let h0 = spec.h(s0.y[0], 0.0)?;
        let chain = CbfChain::new(&spec, &kappas, h0)?;
        if self.controller.mode != ControlMode::Openloop && !(self.controller.m > 0.0) {
            return Err(Error::MValue { branch: "before t_M".into(), reason: format!("M = {} must be positive", self.controller.m) });
        }
        if self.output.stride == Some(0) {
            return Err(Error::Config("output.stride must be positive".into()));
        }
        Ok(Prepared { params, grid, spec, chain, c, s0, steps_per_period })
    }
}

/// One named pass/fail line. Warnings only fail under `strict`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub warning: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, pass: bool, detail: String) -> CheckResult {
        CheckResult { name: name.into(), pass, warning: false, detail }
    }

    fn warn(name: &str, pass: bool, detail: String) -> CheckResult {
        CheckResult { name: name.into(), pass, warning: true, detail }
    }
}

/// Outcome of validating the drive amplitude.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmplitudeReport {
    pub m_before: f64,
    pub m_after: f64,
    pub t_m: f64,
    /// Excluded value of the first branch (adaptive only).
    pub excluded: Option<f64>,
    pub bound: Option<f64>,
    /// Box samples used for the bound; corners plus centre stand in for the
    /// max over the box.
    pub samples: Vec<(f64, f64)>,
    pub valid: bool,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub name: String,
    pub config: Scenario,
    pub kappas: Vec<f64>,
    pub c: f64,
    pub safety: SafetyReport,
    pub final_to_peak: f64,
    pub lyapunov_slope: Option<f64>,
    pub chain_residual: f64,
    pub amplitude: Option<AmplitudeReport>,
    pub certificates: Vec<Certificate>,
    pub final_estimate: (f64, f64),
    pub kernel_residuals: Option<KernelResiduals>,
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

impl Report {
    pub fn passed(&self, strict: bool) -> bool {
        self.checks.iter().all(|c| c.pass || (c.warning && !strict))
    }
}

pub struct Outcome {
    pub report: Report,
    pub log: TrajectoryLog,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub stride: Option<usize>,
    pub strict: bool,
    /// Skip kernel residuals (they cost a few extra table builds).
    pub skip_residuals: bool,
}

pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> Result<Outcome> {
    let prep = sc.prepare()?;
    let Prepared { params, grid, spec, chain, c, s0, steps_per_period } = prep;
    let cfg = &sc.controller;
    let kopts = cfg.kernel_options();
    let nx = grid.nx;
    let m_after = cfg.m_after.unwrap_or(cfg.m);
    let transform = build_structural_transform(&params.a, params.b)?;
    let n = params.n();
    let theta = spec.dh_dy1(0.0)?;

    let mut nominal_amplitude = None;
    let mut ctrl = match cfg.mode {
        ControlMode::Openloop => Controller::openloop(&chain, &params, nx),
        ControlMode::Nominal => {
            let tables = KernelTables::build(&params, &chain, c, nx, &kopts)?;
            let w0 = tables.transform_profile(&s0.u, &s0.y, 0.0)?;
            let acute = fourier_coeffs(&w0, CoeffKind::ThetaAcute, cfg.series_terms);
            let h_n0 = chain.eval(&transform.z_of(&s0.y), 0.0)?[n - 1];
            let t_m = find_tm_nominal(h_n0, &acute, params.b, theta, chain.kappas[n - 1], c, params.eps, grid.dt, grid.t_final);
            let amp = match select_m_nominal(&acute, t_m, params.eps) {
                Ok(b) => AmplitudeReport {
                    m_before: cfg.m,
                    m_after,
                    t_m,
                    excluded: None,
                    bound: Some(b.bound),
                    samples: vec![(params.lambda, params.b)],
                    valid: m_after > b.bound,
                    message: format!("bound {:.6e} from sup at t = {:.4}", b.bound, b.t_sup),
                },
                Err(e) => AmplitudeReport {
                    m_before: cfg.m,
                    m_after,
                    t_m,
                    excluded: None,
                    bound: None,
                    samples: vec![],
                    valid: false,
                    message: e.to_string(),
                },
            };
            let switch = cfg.m_after.map(|_| t_m);
            nominal_amplitude = Some(amp);
            let mut ctl = Controller::nominal(&chain, &params, c, cfg.m, m_after, switch, nx, &kopts)?;
            ctl.tables = Some(tables);
            ctl
        }
        ControlMode::Adaptive => {
            let id = sc.identifier.as_ref().expect("checked in prepare");
            let a_last: Vec<f64> = params.a.row(n - 1).iter().copied().collect();
            let est = Estimator::new(id, grid.dt, steps_per_period.expect("checked in prepare"), params.eps, &a_last, &params.theta_box)?;
            let monitor = TmMonitor::new(&params, &chain, c, nx, &kopts, &s0, cfg.series_terms)?;
            Controller::adaptive(&chain, &params, c, cfg.m, m_after, nx, &kopts, est, Some(monitor))?
        }
    };
    let initial_tables = ctrl.tables.clone();

    let stride = opts.stride.or(sc.output.stride).unwrap_or(1);
    let log = run_controller(&s0, &params, &grid, &mut ctrl, &transform, &mut [], stride)?;

    let amplitude = match cfg.mode {
        ControlMode::Nominal => nominal_amplitude,
        ControlMode::Openloop => None,
        ControlMode::Adaptive => {
            let id = sc.identifier.as_ref().expect("checked in prepare");
            let monitor = ctrl.finish_monitoring().expect("adaptive controller carries a monitor");
            let t_m = monitor.t_m.unwrap_or(grid.t_final);
            let identified = ctrl.tables.as_ref().expect("adaptive tables");
            let init = initial_tables.as_ref().expect("adaptive tables");
            let samples = monitor.sample_tables();
            Some(match select_m_adaptive(cfg.m, m_after, init, &s0, theta, t_m, id.period, &samples, identified, cfg.series_terms) {
                Ok(v) => AmplitudeReport {
                    m_before: v.m_before,
                    m_after: v.m_after,
                    t_m,
                    excluded: Some(v.excluded),
                    bound: Some(v.bound),
                    samples: v.samples,
                    valid: true,
                    message: "both branches hold".into(),
                },
                Err(e) => AmplitudeReport {
                    m_before: cfg.m,
                    m_after,
                    t_m,
                    excluded: crate::controller::excluded_m(init, &s0, theta).ok(),
                    bound: None,
                    samples: samples.iter().map(|t| (t.lambda, t.b)).collect(),
                    valid: false,
                    message: e.to_string(),
                },
            })
        }
    };

    let safety = safety_report(&log, sc.barrier.t_a);
    let mets = metrics(&log);
    let final_to_peak = mets.final_to_peak();
    let chain_res = chain_residual(&log, &chain.kappas, 0.0, grid.t_final);

    let true_tables = match cfg.mode {
        ControlMode::Openloop => None,
        _ => Some(KernelTables::build(&params, &chain, c, nx, &kopts)?),
    };
    let lyapunov_slope = match &true_tables {
        Some(tables) => {
            let b_bar = if cfg.mode == ControlMode::Adaptive { params.theta_box.b_max } else { params.b };
            let weights = lyapunov_weights(&chain.kappas, b_bar, theta.abs(), params.eps, c, 1.1)?;
            let delta = |t: f64| ctrl.delta(t);
            let (times, values) = lyapunov_series(&log, tables, &weights, &delta)?;
            let from = sc.checks.lyapunov_fit_from.unwrap_or(1.0);
            fit_log_slope(&times, &values, from, grid.t_final)
        }
        None => None,
    };
    let kernel_res = match (&true_tables, opts.skip_residuals) {
        (Some(t), false) => Some(kernel_residuals(t, &params.a, &[0.0, 0.5, 1.0, 2.0])?),
        _ => None,
    };

    let certificates = ctrl.estimator.as_ref().map(|e| e.certificates.clone()).unwrap_or_default();
    let mut checks = Vec::new();
    match sc.expect {
        Expectation::Safe => {
            checks.push(CheckResult::new(
                "stays_safe",
                safety.initially_safe && safety.min_h >= 0.0,
                format!("min h = {:.6e}", safety.min_h),
            ));
        }
        Expectation::Recover => {
            let detail = format!("recovery at {:?}, t_a = {}", safety.recovery_time, sc.barrier.t_a);
            checks.push(CheckResult::new("recovers_before_t_a", !safety.initially_safe && safety.safe, detail));
            checks.push(CheckResult::new(
                "safe_after_recovery",
                safety.recovery_time.is_some() && safety.min_h_after_start >= 0.0,
                format!("min h after recovery = {:.6e}", safety.min_h_after_start),
            ));
            if let Some([lo, hi]) = sc.checks.recovery_window {
                let t = safety.recovery_time.unwrap_or(f64::INFINITY);
                checks.push(CheckResult::new("recovery_window", t >= lo && t <= hi, format!("recovery {t:.4} vs [{lo}, {hi}]")));
            }
        }
        Expectation::Unstable => {
            let from = sc.checks.growth_from.unwrap_or(1.0);
            checks.push(CheckResult::new("grows", mets.grows_after(from), format!("||u|| monotone after t = {from}")));
        }
    }
    if let Some(r) = sc.checks.decay_ratio {
        checks.push(CheckResult::new("decay", final_to_peak < r, format!("final/peak = {final_to_peak:.3e} (limit {r:e})")));
    }
    if let (Some(tol), Some(first)) = (sc.checks.identification_tol, certificates.first()) {
        let el = (first.lambda_hat - params.lambda).abs() / params.lambda.abs();
        let eb = (first.b_hat - params.b).abs() / params.b;
        checks.push(CheckResult::new(
            "identification",
            el <= tol && eb <= tol,
            format!("t1 = {}: lambda_hat = {:.6}, b_hat = {:.6}", first.t, first.lambda_hat, first.b_hat),
        ));
    }
    if let Some(limit) = sc.checks.lyapunov_slope_max {
        let pass = lyapunov_slope.is_some_and(|s| s <= limit);
        checks.push(CheckResult::new("lyapunov_decay", pass, format!("slope {lyapunov_slope:?} (limit {limit})")));
    }
    if let Some(a) = &amplitude {
        checks.push(CheckResult::warn("amplitude_condition", a.valid, a.message.clone()));
    }

    let mut report = Report {
        name: sc.name.clone(),
        config: sc.clone(),
        kappas: chain.kappas.clone(),
        c,
        safety,
        final_to_peak,
        lyapunov_slope,
        chain_residual: chain_res,
        amplitude,
        certificates,
        final_estimate: ctrl.estimate(),
        kernel_residuals: kernel_res,
        checks,
        pass: false,
    };
    report.pass = report.passed(opts.strict);
    Ok(Outcome { report, log })
}

/// Writes trajectory.csv, field.csv and report.json into `dir`.
pub fn write_outputs(out: &Outcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    out.log.write_trajectory_csv(&dir.join("trajectory.csv"))?;
    out.log.write_field_csv(&dir.join("field.csv"))?;
    let json = serde_json::to_string_pretty(&out.report).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "tiny"
expect = "safe"

[plant]
a = [[0.0, 1.0], [2.0, -1.0]]
b = 5.0
eps = 1.0
lambda = 10.0
theta_box = { lambda_min = 8.0, lambda_max = 12.0, b_min = 3.0, b_max = 7.0 }

[initial]
u0 = { kind = "poly_sine", power = 2, waves = 4.0 }
y0 = [10.0, 0.0]

[grid]
nx = 10
dt = 0.002
t_final = 0.1

[barrier]
family = "output"
t_a = 1.0
beta = 1.0

[controller]
mode = "nominal"
kappas = [23.0, 3.0]
m = 3000.0
"#;

    #[test]
    fn parses_and_prepares() {
        let sc: Scenario = toml::from_str(MINIMAL).unwrap();
        let p = sc.prepare().unwrap();
        assert_eq!(p.c, 3.0);
        assert_eq!(p.chain.kappas, vec![23.0, 3.0]);
    }

    #[test]
    fn period_must_be_multiple_of_dt() {
        let mut sc: Scenario = toml::from_str(MINIMAL).unwrap();
        sc.controller.mode = ControlMode::Adaptive;
        sc.identifier = Some(IdentifierConfig {
            period: 0.0015,
            window_periods: 12,
            modes: vec![1],
            lambda0: 8.0,
            b0: 7.0,
            consistency_tol: 0.05,
            weights: Default::default(),
        });
        assert!(matches!(sc.prepare(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_field_is_config_error() {
        let bad = MINIMAL.replace("beta = 1.0", "beta = 1.0\nbogus = 2");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, bad).unwrap();
        let err = load_scenario(&path).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("bogus")), "{err}");
    }

    #[test]
    fn short_run_produces_report() {
        let sc: Scenario = toml::from_str(MINIMAL).unwrap();
        let out = run_scenario(&sc, &RunOptions { skip_residuals: true, ..Default::default() }).unwrap();
        assert_eq!(out.log.len(), 51);
        assert!(out.report.checks.iter().any(|c| c.name == "stays_safe"));
    }
}
