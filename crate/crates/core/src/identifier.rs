//! Triggered batch least-squares identification of (lambda, b) from logged
//! boundary values, a sine moment of the PDE state and the last ODE state.

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cumtrapz, trapz};
use crate::plant::{ParamBox, SimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifierConfig {
    /// Trigger period T.
    pub period: f64,
    /// Window length in periods.
    pub window_periods: usize,
    /// Sine moments used, 1-based.
    #[serde(default = "default_modes")]
    pub modes: Vec<usize>,
    pub lambda0: f64,
    pub b0: f64,
    /// Relative disagreement tolerated between moments before reporting an
    /// inconsistency.
    #[serde(default = "default_consistency")]
    pub consistency_tol: f64,
    #[serde(default)]
    pub weights: MomentWeights,
}

/// Weights in the moment identity. `Continuum` uses n pi and (n pi)^2;
/// `Grid` uses their finite-difference symbols sin(n pi h)/h and
/// 4 sin^2(n pi h / 2)/h^2, for which summation by parts on the plant grid is
/// exact and only the time quadrature remains as an error source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentWeights {
    Continuum,
    #[default]
    Grid,
}

impl MomentWeights {
    /// (boundary weight, eigenvalue) for sine mode `mode` on spacing h.
    pub fn of(self, mode: usize, h: f64) -> (f64, f64) {
        let w = mode as f64 * PI;
        match self {
            MomentWeights::Continuum => (w, w * w),
            MomentWeights::Grid => ((w * h).sin() / h, (2.0 * (0.5 * w * h).sin() / h).powi(2)),
        }
    }
}

fn default_modes() -> Vec<usize> {
    vec![1]
}

fn default_consistency() -> f64 {
    0.05
}

/// Next trigger and window start after epoch i:
/// t_{i+1} = (i+1) T and mu_{i+1} = min{ t_j >= t_{i+1} - N T, j <= i }.
pub fn schedule(i: usize, period: f64, window_periods: usize) -> (f64, f64) {
    let next = (i + 1) as f64 * period;
    let first = (i + 1).saturating_sub(window_periods.max(1));
    (next, first as f64 * period)
}

/// Equally spaced samples of the signals the regressors need.
#[derive(Debug, Clone, Default)]
pub struct SignalLog {
    pub dt: f64,
    /// Index of the first retained sample (sample k is at t = k dt).
    pub start: usize,
    pub u0: Vec<f64>,
    pub u1: Vec<f64>,
    /// moments[m][k] = int_0^1 sin(n_m pi x) u(x, t_k) dx
    pub moments: Vec<Vec<f64>>,
    pub y: Vec<DVector<f64>>,
    pub modes: Vec<usize>,
    /// Spatial step of the logged profiles.
    pub h: f64,
}

impl SignalLog {
    pub fn new(dt: f64, modes: &[usize]) -> SignalLog {
        SignalLog { dt, modes: modes.to_vec(), moments: vec![Vec::new(); modes.len()], ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.u0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u0.is_empty()
    }

    pub fn push(&mut self, s: &SimState) {
        let nx = s.u.len() - 1;
        let h = 1.0 / nx as f64;
        self.h = h;
        self.u0.push(s.u[0]);
        self.u1.push(s.u[nx]);
        for (m, mode) in self.modes.iter().enumerate() {
            let w = *mode as f64 * PI;
            let prod: Vec<f64> = s.u.iter().enumerate().map(|(i, u)| (w * i as f64 * h).sin() * u).collect();
            self.moments[m].push(trapz(&prod, h));
        }
        self.y.push(s.y.clone());
    }

    /// Drops samples before `t`.
    pub fn retain_from(&mut self, t: f64) {
        let keep = (t / self.dt).round() as usize;
        if keep <= self.start {
            return;
        }
        let cut = (keep - self.start).min(self.len());
        self.u0.drain(..cut);
        self.u1.drain(..cut);
        for m in self.moments.iter_mut() {
            m.drain(..cut);
        }
        self.y.drain(..cut);
        self.start += cut;
    }

    fn range(&self, mu: f64, t: f64) -> Result<(usize, usize)> {
        let a = (mu / self.dt).round() as usize;
        let b = (t / self.dt).round() as usize;
        if a < self.start || b >= self.start + self.len() || b < a {
            return Err(Error::Window { start: mu, end: t });
        }
        Ok((a - self.start, b - self.start))
    }
}

/// Regressor signals on the samples of [mu, t].
#[derive(Debug, Clone, PartialEq)]
pub struct Regressors {
    pub mu: f64,
    pub dt: f64,
    /// per mode
    pub p_mode: Vec<Vec<f64>>,
    pub g_mode: Vec<Vec<f64>>,
    pub p_b: Vec<f64>,
    pub q_b: Vec<f64>,
}

/// `a_last` is the last row of A.
pub fn regressors(log: &SignalLog, mu: f64, t: f64, eps: f64, a_last: &[f64], weights: MomentWeights) -> Result<Regressors> {
    let (a, b) = log.range(mu, t)?;
    let dt = log.dt;
    let int_u0 = cumtrapz(&log.u0[a..=b], dt);
    let int_u1 = cumtrapz(&log.u1[a..=b], dt);
    let n = a_last.len();
    let drift: Vec<f64> = log.y[a..=b].iter().map(|y| (0..n).map(|i| a_last[i] * y[i]).sum()).collect();
    let int_drift = cumtrapz(&drift, dt);
    let p_b: Vec<f64> = (0..=b - a).map(|k| log.y[a + k][n - 1] - log.y[a][n - 1] - int_drift[k]).collect();

    let mut p_mode = Vec::new();
    let mut g_mode = Vec::new();
    for (m, mode) in log.modes.iter().enumerate() {
        let (w, eig) = weights.of(*mode, log.h);
        let sign = if mode % 2 == 0 { 1.0 } else { -1.0 };
        let mom = &log.moments[m][a..=b];
        let g = cumtrapz(mom, dt);
        let p = (0..=b - a).map(|k| mom[k] + eps * w * sign * int_u1[k] - eps * w * int_u0[k] + eps * eig * g[k] - mom[0]).collect();
        p_mode.push(p);
        g_mode.push(g);
    }
    Ok(Regressors { mu, dt, p_mode, g_mode, p_b, q_b: int_u0 })
}

/// Normal equations of one moment: Z = diag(Q1, Q2) theta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LsSystem {
    pub mode: usize,
    pub h1: f64,
    pub q1: f64,
    pub h2: f64,
    pub q2: f64,
}

pub fn assemble_zg(reg: &Regressors, modes: &[usize]) -> Vec<LsSystem> {
    let dt = reg.dt;
    let prod = |a: &[f64], b: &[f64]| -> f64 {
        let v: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        trapz(&v, dt)
    };
    let h2 = prod(&reg.p_b, &reg.q_b);
    let q2 = prod(&reg.q_b, &reg.q_b);
    modes
        .iter()
        .enumerate()
        .map(|(m, mode)| LsSystem {
            mode: *mode,
            h1: prod(&reg.p_mode[m], &reg.g_mode[m]),
            q1: prod(&reg.g_mode[m], &reg.g_mode[m]),
            h2,
            q2,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub epoch: usize,
    pub t: f64,
    pub mu: f64,
    pub q1: f64,
    pub q2: f64,
    pub lambda_hat: f64,
    pub b_hat: f64,
    pub held_lambda: bool,
    pub held_b: bool,
    pub clamped_lambda: bool,
    pub clamped_b: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Update {
    pub lambda: f64,
    pub b: f64,
    pub held_lambda: bool,
    pub held_b: bool,
    pub clamped_lambda: bool,
    pub clamped_b: bool,
    pub q1: f64,
    pub q2: f64,
}

/// Closest point to `prev` in the box satisfying every nondegenerate
/// constraint; with diagonal G each component is decided separately.
pub fn update_estimate(prev: (f64, f64), systems: &[LsSystem], bx: &ParamBox, q_tol: f64, consistency_tol: f64) -> Result<Update> {
    let live: Vec<&LsSystem> = systems.iter().filter(|s| s.q1 > q_tol).collect();
    let best = live.iter().max_by(|a, b| a.q1.total_cmp(&b.q1));
    let q1 = best.map_or(0.0, |s| s.q1);
    let (lambda, held_lambda, clamped_lambda) = match best {
        None => (prev.0, true, false),
        Some(s) => {
            let ratio = s.h1 / s.q1;
            for other in &live {
                let r = other.h1 / other.q1;
                if (r - ratio).abs() > consistency_tol * ratio.abs().max(1.0) {
                    return Err(Error::Inconsistency(format!("moment {} gives lambda {r}, moment {} gives {ratio}", other.mode, s.mode)));
                }
            }
            let c = bx.clamp_lambda(ratio);
            (c, false, c != ratio)
        }
    };
    let q2 = systems.first().map_or(0.0, |s| s.q2);
    let (b, held_b, clamped_b) = if q2 > q_tol {
        let ratio = systems[0].h2 / q2;
        let c = bx.clamp_b(ratio);
        (c, false, c != ratio)
    } else {
        (prev.1, true, false)
    };
    Ok(Update { lambda, b, held_lambda, held_b, clamped_lambda, clamped_b, q1, q2 })
}

/// Identifier state carried through a run.
#[derive(Debug, Clone)]
pub struct Estimator {
    pub cfg: IdentifierConfig,
    pub theta_hat: (f64, f64),
    pub epoch: usize,
    pub certificates: Vec<Certificate>,
    log: SignalLog,
    steps_per_period: usize,
    eps: f64,
    a_last: Vec<f64>,
    bx: ParamBox,
}

impl Estimator {
    pub fn new(cfg: &IdentifierConfig, dt: f64, steps_per_period: usize, eps: f64, a_last: &[f64], bx: &ParamBox) -> Result<Estimator> {
        if cfg.modes.is_empty() || cfg.modes.contains(&0) {
            return Err(Error::Config("identifier modes must be positive integers".into()));
        }
        if !bx.contains(cfg.lambda0, cfg.b0) {
            return Err(Error::Box(format!("initial estimate ({}, {}) outside the parameter box", cfg.lambda0, cfg.b0)));
        }
        Ok(Estimator {
            cfg: cfg.clone(),
            theta_hat: (cfg.lambda0, cfg.b0),
            epoch: 0,
            certificates: Vec::new(),
            log: SignalLog::new(dt, &cfg.modes),
            steps_per_period,
            eps,
            a_last: a_last.to_vec(),
            bx: *bx,
        })
    }

    /// Records the state at step `k`; at trigger steps solves the batch problem
    /// and returns the new estimate.
    pub fn observe(&mut self, k: usize, s: &SimState) -> Result<Option<(f64, f64)>> {
        self.log.push(s);
        if k == 0 || !k.is_multiple_of(self.steps_per_period) {
            return Ok(None);
        }
        let (t_next, mu) = schedule(self.epoch, self.cfg.period, self.cfg.window_periods);
        let t_next = t_next.min(k as f64 * self.log.dt);
        let reg = regressors(&self.log, mu, t_next, self.eps, &self.a_last, self.cfg.weights)?;
        let systems = assemble_zg(&reg, &self.cfg.modes);
        let q_tol = 1e-12 * (t_next - mu);
        let up = update_estimate(self.theta_hat, &systems, &self.bx, q_tol, self.cfg.consistency_tol)?;
        self.epoch += 1;
        self.theta_hat = (up.lambda, up.b);
        self.certificates.push(Certificate {
            epoch: self.epoch,
            t: t_next,
            mu,
            q1: up.q1,
            q2: up.q2,
            lambda_hat: up.lambda,
            b_hat: up.b,
            held_lambda: up.held_lambda,
            held_b: up.held_b,
            clamped_lambda: up.clamped_lambda,
            clamped_b: up.clamped_b,
        });
        // the next window starts no earlier than this
        let (_, next_mu) = schedule(self.epoch, self.cfg.period, self.cfg.window_periods);
        self.log.retain_from(next_mu);
        Ok(Some(self.theta_hat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wide() -> ParamBox {
        ParamBox { lambda_min: -100.0, lambda_max: 100.0, b_min: 0.01, b_max: 100.0 }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule(0, 0.5, 12), (0.5, 0.0));
        assert_eq!(schedule(20, 0.5, 12), (10.5, 4.5));
        assert_eq!(schedule(7, 0.5, 1), (4.0, 3.5));
    }

    #[test]
    fn componentwise_ratio() {
        let s = LsSystem { mode: 1, h1: 2.0, q1: 4.0, h2: 3.0, q2: 6.0 };
        let up = update_estimate((1.0, 1.0), &[s], &wide(), 1e-12, 0.05).unwrap();
        assert_eq!((up.lambda, up.b), (0.5, 0.5));
    }

    #[test]
    fn degenerate_system_holds() {
        let s = LsSystem { mode: 1, h1: 0.0, q1: 0.0, h2: 0.0, q2: 0.0 };
        let up = update_estimate((9.0, 4.0), &[s], &wide(), 1e-12, 0.05).unwrap();
        assert_eq!((up.lambda, up.b), (9.0, 4.0));
        assert!(up.held_lambda && up.held_b);
    }

    #[test]
    fn out_of_box_ratio_is_clamped() {
        let bx = ParamBox { lambda_min: 8.0, lambda_max: 12.0, b_min: 3.0, b_max: 7.0 };
        let s = LsSystem { mode: 1, h1: 20.0, q1: 1.0, h2: 1.0, q2: 1.0 };
        let up = update_estimate((10.0, 5.0), &[s], &bx, 1e-12, 0.05).unwrap();
        assert_eq!((up.lambda, up.b), (12.0, 3.0));
        assert!(up.clamped_lambda && up.clamped_b);
    }

    #[test]
    fn disagreeing_moments_are_reported() {
        let a = LsSystem { mode: 1, h1: 10.0, q1: 1.0, h2: 1.0, q2: 1.0 };
        let b = LsSystem { mode: 2, h1: 5.0, q1: 0.5, h2: 1.0, q2: 1.0 };
        let c = LsSystem { mode: 3, h1: 4.0, q1: 0.5, h2: 1.0, q2: 1.0 };
        assert!(update_estimate((10.0, 5.0), &[a, b], &wide(), 1e-12, 0.05).is_ok());
        assert!(matches!(update_estimate((10.0, 5.0), &[a, c], &wide(), 1e-12, 0.05), Err(Error::Inconsistency(_))));
    }

    #[test]
    fn constant_regressor_arithmetic() {
        let w = 0.5;
        let n = 51;
        let reg = Regressors {
            mu: 0.0,
            dt: w / (n - 1) as f64,
            p_mode: vec![vec![7.0; n]],
            g_mode: vec![vec![1.0; n]],
            p_b: vec![0.0; n],
            q_b: vec![0.0; n],
        };
        let s = assemble_zg(&reg, &[1])[0];
        assert!((s.h1 - 7.0 * w).abs() < 1e-12 && (s.q1 - w).abs() < 1e-12);
    }

    #[test]
    fn grid_weights_approach_continuum() {
        let (w, e) = MomentWeights::Grid.of(2, 1e-4);
        let (wc, ec) = MomentWeights::Continuum.of(2, 1e-4);
        assert!((w - wc).abs() < 1e-6 && (e - ec).abs() < 1e-4);
    }

    #[test]
    fn zero_log_gives_zero_regressors() {
        let mut log = SignalLog::new(0.01, &[1, 2]);
        let s = SimState { u: vec![0.0; 11], y: DVector::zeros(2), t: 0.0 };
        for _ in 0..20 {
            log.push(&s);
        }
        let r = regressors(&log, 0.0, 0.19, 1.0, &[2.0, -1.0], MomentWeights::Grid).unwrap();
        assert!(r.p_mode.iter().chain(&r.g_mode).flatten().all(|v| *v == 0.0));
        assert!(r.p_b.iter().chain(&r.q_b).all(|v| *v == 0.0));
        assert!(matches!(regressors(&log, 0.0, 0.5, 1.0, &[2.0, -1.0], MomentWeights::Grid), Err(Error::Window { .. })));
    }
}
