//! Boundary control law, the decaying drive delta(t), and the selection of
//! the drive amplitude M and the switching time t_M.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::barrier::CbfChain;
use crate::error::{Error, Result};
use crate::identifier::Estimator;
use crate::kernels::{KernelOptions, KernelTables};
use crate::linalg::adaptive_simpson;
use crate::plant::{ParamBox, PlantParams, SimState};
use crate::series::{fourier_coeffs, heat_tail_bound, mode_frequency, mode_heat_sum, theta_gap, CoeffKind, ModeCoeffs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    Nominal,
    Adaptive,
    Openloop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub mode: ControlMode,
    /// Target decay rate; defaults to the last gain.
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub kappas: Option<Vec<f64>>,
    /// Drive amplitude.
    pub m: f64,
    /// Amplitude used from t_M on; None keeps `m` throughout.
    #[serde(default)]
    pub m_after: Option<f64>,
    #[serde(default = "default_terms")]
    pub series_terms: usize,
    #[serde(default = "default_p_order")]
    pub p_order: usize,
    #[serde(default = "default_kernel_tol")]
    pub kernel_tol: f64,
}

fn default_terms() -> usize {
    64
}

fn default_p_order() -> usize {
    KernelOptions::default().p_order
}

fn default_kernel_tol() -> f64 {
    KernelOptions::default().tol
}

impl ControllerConfig {
    pub fn kernel_options(&self) -> KernelOptions {
        KernelOptions { tol: self.kernel_tol, p_order: self.p_order, ..KernelOptions::default() }
    }
}

/// sign * M * e^{-ct}
pub fn delta_eval(t: f64, m: f64, c: f64, theta_sign: f64) -> f64 {
    theta_sign.signum() * m * (-c * t).exp()
}

/// U = int_0^1 k(1,y) u(y,t) dy + r(1) Y + delta(t) + p(1,t).
pub fn nominal_control(s: &SimState, tables: &KernelTables, delta: f64, t: f64) -> Result<f64> {
    let nx = tables.nx;
    let integral = tables.boundary_integral(&s.u);
    let feedback = tables.feedback_row(nx).dot(&s.y);
    let (p, _) = tables.p_explicit(1.0, t)?;
    Ok(integral + feedback + delta + p)
}

/// Same law with tables built from the estimate held over the current epoch.
pub fn adaptive_control(s: &SimState, est_tables: &KernelTables, delta: f64, t: f64) -> Result<f64> {
    nominal_control(s, est_tables, delta, t)
}

/// Right-hand side of the amplitude condition: numerator / denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MBound {
    pub t_m: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub bound: f64,
    /// Time at which the sup was attained.
    pub t_sup: f64,
}

/// sup over t >= t_M of |2 sum_j e^{-eps nu_j^2 t} acute_j| divided by
/// 1 - 2 sum_j e^{-eps nu_j^2 t_M} (-1)^j / nu_j.
pub fn select_m_nominal(acute: &ModeCoeffs, t_m: f64, eps: f64) -> Result<MBound> {
    if !(t_m > 0.0) {
        return Err(Error::Denominator(format!("t_M must be positive, got {t_m}")));
    }
    // 1 - (4/pi)(pi/4 - L) = (4/pi) L
    let gap = theta_gap(eps * PI * PI * t_m / 4.0, acute.len().max(1))?;
    let denominator = 4.0 / PI * gap.value;
    if !(denominator > 0.0) {
        return Err(Error::Denominator(format!("denominator underflows at t_M = {t_m}")));
    }
    let nu0 = mode_frequency(0);
    let t_cap = (300.0 * 10f64.ln()) / (eps * nu0 * nu0);
    let mut numerator = 0.0f64;
    let mut t_sup = t_m;
    let mut t = t_m;
    while t <= t_cap {
        let (v, tail) = mode_heat_sum(acute, eps, t);
        let val = v.abs() + tail;
        if val > numerator {
            numerator = val;
            t_sup = t;
        }
        t *= 1.02;
    }
    // beyond the cap every mode is below 1e-300 times its coefficient
    let beyond = 2.0 * acute.coefficient_bound * heat_tail_bound(eps, t_cap.max(t_m), 0);
    numerator = numerator.max(beyond);
    Ok(MBound { t_m, numerator, denominator, bound: numerator / denominator, t_sup })
}

/// Largest multiple of `dt` up to `t_final` such that
/// h_n(0) + b theta int_0^t e^{(kappa_n - c) tau} 2 sum_j e^{-eps nu_j^2 tau} acute_j d tau
/// stays nonnegative on [0, t].
#[allow(clippy::too_many_arguments)]
pub fn find_tm_nominal(h_n0: f64, acute: &ModeCoeffs, b: f64, theta: f64, kappa_n: f64, c: f64, eps: f64, dt: f64, t_final: f64) -> f64 {
    let g = |tau: f64| ((kappa_n - c) * tau).exp() * mode_heat_sum(acute, eps, tau).0;
    let steps = (t_final / dt).round() as usize;
    let mut value = h_n0;
    for k in 0..steps {
        let a = k as f64 * dt;
        value += b * theta * adaptive_simpson(&g, a, a + dt, 1e-12 * dt);
        if value < 0.0 {
            return a;
        }
    }
    t_final
}

/// Amplitude the first branch excludes: M with U_a(0) = 0.
pub fn excluded_m(tables: &KernelTables, s0: &SimState, theta_sign: f64) -> Result<f64> {
    Ok(-nominal_control(s0, tables, 0.0, 0.0)? / theta_sign.signum())
}

/// Outcome of validating M for the adaptive controller.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MValidation {
    pub excluded: f64,
    pub t_m: f64,
    pub t1: f64,
    /// Box samples used for the bound (one when t_M >= t1).
    pub samples: Vec<(f64, f64)>,
    pub bound: f64,
    pub m_before: f64,
    pub m_after: f64,
}

/// Checks both amplitude branches. `sample_tables` holds the tables of the box
/// samples; `identified` the tables of the estimate in force at t_M.
#[allow(clippy::too_many_arguments)]
pub fn select_m_adaptive(
    m_before: f64,
    m_after: f64,
    initial_tables: &KernelTables,
    s0: &SimState,
    theta_sign: f64,
    t_m: f64,
    t1: f64,
    sample_tables: &[&KernelTables],
    identified: &KernelTables,
    terms: usize,
) -> Result<MValidation> {
    if !(m_before > 0.0) {
        return Err(Error::MValue { branch: "before t_M".into(), reason: format!("M = {m_before} must be positive") });
    }
    let excluded = excluded_m(initial_tables, s0, theta_sign)?;
    if (m_before - excluded).abs() <= 1e-9 * excluded.abs().max(1.0) {
        return Err(Error::MValue { branch: "before t_M".into(), reason: format!("M = {m_before} makes the initial control vanish") });
    }
    let pick: Vec<&KernelTables> = if t_m >= t1 { vec![identified] } else { sample_tables.to_vec() };
    let mut bound = 0.0f64;
    for tables in &pick {
        let w0 = tables.transform_profile(&s0.u, &s0.y, 0.0)?;
        let acute = fourier_coeffs(&w0, CoeffKind::ThetaAcute, terms);
        bound = bound.max(select_m_nominal(&acute, t_m, tables.eps)?.bound);
    }
    if !(m_after > bound) {
        return Err(Error::MValue { branch: "after t_M".into(), reason: format!("M = {m_after} does not exceed the bound {bound:.6e}") });
    }
    Ok(MValidation { excluded, t_m, t1, samples: pick.iter().map(|t| (t.lambda, t.b)).collect(), bound, m_before, m_after })
}

struct MonitorSample {
    tables: KernelTables,
    acute: ModeCoeffs,
    h_n0: f64,
    /// J_j(t) = e^{-lambda_j t} int_0^t e^{lambda_j s} e(s) ds per mode.
    conv: Vec<f64>,
    e_prev: f64,
    g_prev: f64,
    integral: f64,
}

/// Online evaluation of the switching condition for the adaptive controller:
/// for each box sample the expression
/// h_n(0) + b theta int_0^t e^{kappa_n tau} (w(0,tau) - drive part) d tau
/// is accumulated, with w(0,.) written through the control error e between the
/// applied input and the sample's own control law.
pub struct TmMonitor {
    samples: Vec<MonitorSample>,
    theta: f64,
    kappa_n: f64,
    c: f64,
    eps: f64,
    terms: usize,
    t_prev: f64,
    pub t_m: Option<f64>,
    pub min_value: f64,
}

impl TmMonitor {
    pub fn new(
        params: &PlantParams,
        chain: &CbfChain,
        c: f64,
        nx: usize,
        opts: &KernelOptions,
        s0: &SimState,
        terms: usize,
    ) -> Result<TmMonitor> {
        Self::with_samples(params, chain, c, nx, opts, s0, terms, &params.theta_box.samples())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_samples(
        params: &PlantParams,
        chain: &CbfChain,
        c: f64,
        nx: usize,
        opts: &KernelOptions,
        s0: &SimState,
        terms: usize,
        samples: &[(f64, f64)],
    ) -> Result<TmMonitor> {
        let n = chain.n();
        let mut out = Vec::new();
        for &(lambda, b) in samples {
            let tables = KernelTables::build(&params.with_theta(lambda, b), chain, c, nx, opts)?;
            let w0 = tables.transform_profile(&s0.u, &s0.y, 0.0)?;
            let acute = fourier_coeffs(&w0, CoeffKind::ThetaAcute, terms);
            let z0 = tables.transform.z_of(&s0.y);
            let h_n0 = chain.eval(&z0, 0.0)?[n - 1];
            let g0 = mode_heat_sum(&acute, params.eps, 0.0).0;
            out.push(MonitorSample { tables, acute, h_n0, conv: vec![0.0; terms], e_prev: f64::NAN, g_prev: g0, integral: 0.0 });
        }
        Ok(TmMonitor {
            samples: out,
            theta: chain.spec.dh_dy1(0.0)?,
            kappa_n: chain.kappas[n - 1],
            c,
            eps: params.eps,
            terms,
            t_prev: 0.0,
            t_m: None,
            min_value: f64::INFINITY,
        })
    }

    pub fn sample_tables(&self) -> Vec<&KernelTables> {
        self.samples.iter().map(|s| &s.tables).collect()
    }

    /// Feeds the input applied at time `t` on state `s`. Returns the box-max of
    /// the expression at `t`.
    pub fn observe(&mut self, s: &SimState, applied: f64, delta: f64) -> Result<f64> {
        let t = s.t;
        let h = t - self.t_prev;
        let mut worst = f64::NEG_INFINITY;
        for smp in self.samples.iter_mut() {
            let e = applied - nominal_control(s, &smp.tables, delta, t)?;
            if smp.e_prev.is_nan() {
                smp.e_prev = e;
                worst = worst.max(smp.h_n0);
                continue;
            }
            let slope = (e - smp.e_prev) / h;
            let mut forced = 0.0;
            for j in 0..self.terms {
                let nu = mode_frequency(j);
                let rate = self.eps * nu * nu + self.c;
                let q = (-rate * h).exp();
                let one_minus = -(-rate * h).exp_m1();
                smp.conv[j] = q * smp.conv[j] + smp.e_prev * one_minus / rate + slope * (h / rate - one_minus / (rate * rate));
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                forced += sign * self.eps * nu * smp.conv[j];
            }
            let g =
                ((self.kappa_n - self.c) * t).exp() * mode_heat_sum(&smp.acute, self.eps, t).0 + (self.kappa_n * t).exp() * 2.0 * forced;
            smp.integral += 0.5 * h * (smp.g_prev + g);
            smp.g_prev = g;
            smp.e_prev = e;
            let value = smp.h_n0 + smp.tables.b * self.theta * smp.integral;
            worst = worst.max(value);
        }
        self.t_prev = t;
        self.min_value = self.min_value.min(worst);
        if self.t_m.is_none() && worst <= 0.0 {
            self.t_m = Some(t);
        }
        Ok(worst)
    }
}

/// Runtime controller used by the closed-loop simulation.
pub struct Controller {
    pub mode: ControlMode,
    pub chain: CbfChain,
    pub c: f64,
    pub theta_sign: f64,
    pub m_before: f64,
    pub m_after: f64,
    /// Switching time, fixed for the nominal controller and found online for
    /// the adaptive one.
    pub t_m: Option<f64>,
    pub tables: Option<KernelTables>,
    pub estimator: Option<Estimator>,
    pub monitor: Option<TmMonitor>,
    params: PlantParams,
    nx: usize,
    opts: KernelOptions,
    pub rebuilds: usize,
}

impl Controller {
    pub fn openloop(chain: &CbfChain, params: &PlantParams, nx: usize) -> Controller {
        Controller {
            mode: ControlMode::Openloop,
            chain: chain.clone(),
            c: 0.0,
            theta_sign: chain.spec.theta_sign(),
            m_before: 0.0,
            m_after: 0.0,
            t_m: None,
            tables: None,
            estimator: None,
            monitor: None,
            params: params.clone(),
            nx,
            opts: KernelOptions::default(),
            rebuilds: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn nominal(
        chain: &CbfChain,
        params: &PlantParams,
        c: f64,
        m: f64,
        m_after: f64,
        t_m: Option<f64>,
        nx: usize,
        opts: &KernelOptions,
    ) -> Result<Controller> {
        let tables = KernelTables::build(params, chain, c, nx, opts)?;
        Ok(Controller {
            mode: ControlMode::Nominal,
            chain: chain.clone(),
            c,
            theta_sign: chain.spec.theta_sign(),
            m_before: m,
            m_after,
            t_m,
            tables: Some(tables),
            estimator: None,
            monitor: None,
            params: params.clone(),
            nx,
            opts: *opts,
            rebuilds: 0,
        })
    }

    /// `params` supplies A and eps; lambda and b come from the estimator.
    #[allow(clippy::too_many_arguments)]
    pub fn adaptive(
        chain: &CbfChain,
        params: &PlantParams,
        c: f64,
        m: f64,
        m_after: f64,
        nx: usize,
        opts: &KernelOptions,
        estimator: Estimator,
        monitor: Option<TmMonitor>,
    ) -> Result<Controller> {
        let (l, b) = estimator.theta_hat;
        let tables = KernelTables::build(&params.with_theta(l, b), chain, c, nx, opts)?;
        Ok(Controller {
            mode: ControlMode::Adaptive,
            chain: chain.clone(),
            c,
            theta_sign: chain.spec.theta_sign(),
            m_before: m,
            m_after,
            t_m: None,
            tables: Some(tables),
            estimator: Some(estimator),
            monitor,
            params: params.clone(),
            nx,
            opts: *opts,
            rebuilds: 0,
        })
    }

    pub fn amplitude(&self, t: f64) -> f64 {
        match self.t_m {
            Some(tm) if t >= tm => self.m_after,
            _ => self.m_before,
        }
    }

    pub fn delta(&self, t: f64) -> f64 {
        delta_eval(t, self.amplitude(t), self.c, self.theta_sign)
    }

    /// Estimate in force; the true values for the nominal controller.
    pub fn estimate(&self) -> (f64, f64) {
        match &self.estimator {
            Some(e) => e.theta_hat,
            None => (self.params.lambda, self.params.b),
        }
    }

    /// Input for step `k` on the pre-step state `s`.
    pub fn control(&mut self, k: usize, s: &SimState) -> Result<f64> {
        if self.mode == ControlMode::Openloop {
            return Ok(0.0);
        }
        if let Some(est) = self.estimator.as_mut() {
            if let Some((l, b)) = est.observe(k, s)? {
                let current = self.tables.as_ref().map(|t| (t.lambda, t.b));
                if current != Some((l, b)) {
                    self.tables = Some(KernelTables::build(&self.params.with_theta(l, b), &self.chain, self.c, self.nx, &self.opts)?);
                    self.rebuilds += 1;
                }
            }
        }
        let t = s.t;
        let tables = self.tables.as_ref().expect("closed-loop modes carry tables");
        let delta = self.delta(t);
        let u = nominal_control(s, tables, delta, t)?;
        if let Some(mon) = self.monitor.as_mut() {
            let had = mon.t_m.is_some();
            mon.observe(s, u, delta)?;
            if !had && mon.t_m.is_some() && self.mode == ControlMode::Adaptive {
                self.t_m = mon.t_m;
            }
        }
        Ok(u)
    }

    /// Drops the monitor once it is no longer needed.
    pub fn finish_monitoring(&mut self) -> Option<TmMonitor> {
        self.monitor.take()
    }

    pub fn box_samples(&self) -> Vec<(f64, f64)> {
        self.params.theta_box.samples()
    }

    pub fn param_box(&self) -> ParamBox {
        self.params.theta_box
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::BarrierSpec;
    use crate::plant::{case1_params, init_state, Grid};

    #[test]
    fn delta_examples() {
        assert_eq!(delta_eval(0.0, 3000.0, 3.0, 1.0), 3000.0);
        assert_eq!(delta_eval(0.0, 8000.0, 3.0, -1.0), -8000.0);
        let (t, h) = (0.7, 1e-5);
        let d = |t| delta_eval(t, 5.0, 3.0, 1.0);
        let dd = (d(t + h) - d(t - h)) / (2.0 * h);
        assert!((3.0 * d(t) + dd).abs() < 1e-6);
    }

    fn zero_coeffs() -> ModeCoeffs {
        fourier_coeffs(&[0.0; 21], CoeffKind::ThetaAcute, 64)
    }

    #[test]
    fn zero_profile_bound_vanishes() {
        let b = select_m_nominal(&zero_coeffs(), 0.3, 1.0).unwrap();
        assert_eq!(b.bound, 0.0);
        assert!(b.denominator > 0.0 && b.denominator < 1.0);
    }

    #[test]
    fn denominator_limits() {
        assert!(matches!(select_m_nominal(&zero_coeffs(), 0.0, 1.0), Err(Error::Denominator(_))));
        let small = select_m_nominal(&zero_coeffs(), 0.01, 1.0).unwrap().denominator;
        let large = select_m_nominal(&zero_coeffs(), 1.0, 1.0).unwrap().denominator;
        assert!(small < 1e-10 && small > 0.0);
        assert!((large - (1.0 - 4.0 / PI * (-PI * PI / 4.0).exp())).abs() < 1e-4);
    }

    #[test]
    fn no_modes_keeps_horizon() {
        let t = find_tm_nominal(2.0, &zero_coeffs(), 5.0, 1.0, 3.0, 3.0, 1.0, 1e-3, 5.0);
        assert_eq!(t, 5.0);
    }

    #[test]
    fn single_mode_crossing_matches_closed_form() {
        // acute_0 = -q: h - 2 b q (e^{a t} - 1)/a, a = kappa - c - eps (pi/2)^2
        let q = 0.3;
        let coeffs = ModeCoeffs { kind: CoeffKind::ThetaAcute, values: vec![-q], coefficient_bound: 0.0 };
        let (h, b, kappa, c, eps) = (1.0, 5.0, 3.0, 3.0, 1.0);
        let a = kappa - c - eps * PI * PI / 4.0;
        // crossing where (e^{a t} - 1)/a = h / (2 b q)
        let exact = (1.0 + a * h / (2.0 * b * q)).ln() / a;
        let dt = 1e-3;
        let t = find_tm_nominal(h, &coeffs, b, 1.0, kappa, c, eps, dt, 5.0);
        assert!(t <= exact && exact - t <= dt + 1e-12, "t = {t}, exact = {exact}");
    }

    #[test]
    fn excluded_value_for_zero_data() {
        let p = case1_params();
        let spec = BarrierSpec::output(1.0, 1.0);
        let chain = CbfChain::new(&spec, &[23.0, 3.0], 1.0).unwrap();
        let tables = KernelTables::build(&p, &chain, 3.0, 10, &KernelOptions::default()).unwrap();
        let grid = Grid::new(10, 1e-3, 1.0, 1.0).unwrap();
        let s0 = init_state(&grid, |_| 0.0, &[0.0, 0.0], 2).unwrap();
        // with y1(0) = 0 the chain is at its safe sigma branch, so p(1,0) = 0
        let ex = excluded_m(&tables, &s0, 1.0).unwrap();
        assert!(ex.abs() < 1e-9, "{ex}");
        let err = select_m_adaptive(ex, 10.0, &tables, &s0, 1.0, 1.0, 0.5, &[], &tables, 16);
        assert!(matches!(err, Err(Error::MValue { .. })));
    }
}
