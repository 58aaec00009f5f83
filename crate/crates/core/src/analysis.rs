//! Post-run diagnostics: Lyapunov functional, state norms, barrier margins,
//! recovery time and decay-rate fits.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::barrier::a_h;
use crate::error::{Error, Result};
use crate::kernels::KernelTables;
use crate::linalg::trapz;
use crate::sim::TrajectoryLog;

/// Solves A^T P + P A = -Q through the Kronecker form.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(Error::Dimension("Lyapunov equation needs square matrices of equal size".into()));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let lhs = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DVector::from_column_slice(q.as_slice());
    let lu = lhs.lu();
    let x = lu.solve(&rhs).ok_or_else(|| Error::Singular("A and -A share an eigenvalue".into()))?;
    let p = DMatrix::from_column_slice(n, n, x.as_slice());
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("non-finite solution".into()));
    }
    Ok(0.5 * (&p + p.transpose()))
}

/// P for the chain matrix with Q = I, and the functional weights a1, a2
/// chosen a factor `margin` above their lower bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovWeights {
    pub p: Vec<Vec<f64>>,
    pub q_min: f64,
    pub pb_norm: f64,
    pub theta_bar: f64,
    pub a1: f64,
    pub a2: f64,
}

pub fn lyapunov_weights(kappas: &[f64], b_bar: f64, theta_bar: f64, eps: f64, c: f64, margin: f64) -> Result<LyapunovWeights> {
    if kappas.contains(&0.0) {
        return Err(Error::Singular("a chain gain is zero".into()));
    }
    let n = kappas.len();
    let ah = a_h(kappas);
    let q = DMatrix::<f64>::identity(n, n);
    let p = solve_lyapunov(&ah, &q)?;
    let mut bvec = DVector::zeros(n);
    bvec[n - 1] = b_bar;
    let pb_norm = (&p * bvec).norm();
    let q_min = 1.0;
    let core = 3.0 * pb_norm * pb_norm * theta_bar * theta_bar / (c * q_min);
    let a1 = (core - eps / c).max(0.0) * margin + 1e-12;
    let a2 = core * margin + 1e-12;
    Ok(LyapunovWeights { p: p.row_iter().map(|r| r.iter().copied().collect()).collect(), q_min, pb_norm, theta_bar, a1, a2 })
}

/// Forward differences, backward at the last node.
pub fn one_sided_gradient(v: &[f64], dx: f64) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| if i + 1 < n { (v[i + 1] - v[i]) / dx } else { (v[i] - v[i - 1]) / dx }).collect()
}

/// H^T P H + 1/2 int v^2 + a1/2 int v_x^2 + a2/2 delta^2
#[allow(clippy::too_many_arguments)]
pub fn lyapunov_value(h: &[f64], v: &[f64], v_x: &[f64], delta: f64, p: &[Vec<f64>], a1: f64, a2: f64, dx: f64) -> f64 {
    let mut quad = 0.0;
    for i in 0..h.len() {
        for j in 0..h.len() {
            quad += h[i] * p[i][j] * h[j];
        }
    }
    let sq = |f: &[f64]| -> f64 {
        let s: Vec<f64> = f.iter().map(|x| x * x).collect();
        trapz(&s, dx)
    };
    quad + 0.5 * sq(v) + 0.5 * a1 * sq(v_x) + 0.5 * a2 * delta * delta
}

/// Norms per field snapshot.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub times: Vec<f64>,
    pub u_norm: Vec<f64>,
    pub ux_norm: Vec<f64>,
    pub y_norm: Vec<f64>,
    /// ||u||^2 + ||u_x||^2 + |Y|^2
    pub xi: Vec<f64>,
}

impl Metrics {
    /// (||u|| + ||u_x|| + |Y|) at the last snapshot over its peak.
    pub fn final_to_peak(&self) -> f64 {
        let total: Vec<f64> = (0..self.times.len()).map(|k| self.u_norm[k] + self.ux_norm[k] + self.y_norm[k]).collect();
        let peak = total.iter().copied().fold(0.0, f64::max);
        match total.last() {
            Some(v) if peak > 0.0 => v / peak,
            _ => 0.0,
        }
    }

    /// True when ||u|| increases between every pair of snapshots after `t0`.
    pub fn grows_after(&self, t0: f64) -> bool {
        let idx: Vec<usize> = (0..self.times.len()).filter(|k| self.times[*k] >= t0).collect();
        idx.len() >= 2 && idx.windows(2).all(|w| self.u_norm[w[1]] > self.u_norm[w[0]])
    }
}

pub fn metrics(log: &TrajectoryLog) -> Metrics {
    let dx = if log.xs.len() > 1 { log.xs[1] - log.xs[0] } else { 1.0 };
    let mut m = Metrics::default();
    for (s, u) in log.field.iter().enumerate() {
        let k = s * log.stride;
        let sq: Vec<f64> = u.iter().map(|v| v * v).collect();
        let grad = one_sided_gradient(u, dx);
        let gsq: Vec<f64> = grad.iter().map(|v| v * v).collect();
        let un = trapz(&sq, dx);
        let gn = trapz(&gsq, dx);
        let yn: f64 = log.y[k].iter().map(|v| v * v).sum();
        m.times.push(log.field_times[s]);
        m.u_norm.push(un.sqrt());
        m.ux_norm.push(gn.sqrt());
        m.y_norm.push(yn.sqrt());
        m.xi.push(un + gn + yn);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafetyReport {
    pub initially_safe: bool,
    pub t_a: f64,
    /// Min of h over the whole run.
    pub min_h: f64,
    /// Min of h from the applicable start (0 for a safe start, the recovery
    /// time otherwise).
    pub min_h_after_start: f64,
    /// First time after which h stays nonnegative; 0 for a safe start that
    /// never leaves.
    pub recovery_time: Option<f64>,
    /// Min over i and t of the chain h_1..h_n.
    pub h_chain_min: f64,
    /// Min of h_n alone.
    pub h_last_min: f64,
    pub safe: bool,
}

pub fn safety_report(log: &TrajectoryLog, t_a: f64) -> SafetyReport {
    let min_h = log.h.iter().copied().fold(f64::INFINITY, f64::min);
    let initially_safe = log.h.first().is_some_and(|h| *h > 0.0);
    let last_bad = log.h.iter().rposition(|h| *h < 0.0);
    let recovery_time = match last_bad {
        None => Some(0.0),
        Some(k) if k + 1 < log.len() => Some(log.times[k + 1]),
        Some(_) => None,
    };
    let start = match last_bad {
        None => 0,
        Some(k) => k + 1,
    };
    let min_h_after_start = log.h[start.min(log.h.len())..].iter().copied().fold(f64::INFINITY, f64::min);
    let h_chain_min = log.chain.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let h_last_min = log.chain.iter().filter_map(|c| c.last().copied()).fold(f64::INFINITY, f64::min);
    let safe = if initially_safe { min_h >= 0.0 } else { recovery_time.is_some_and(|t| t <= t_a) };
    SafetyReport { initially_safe, t_a, min_h, min_h_after_start, recovery_time, h_chain_min, h_last_min, safe }
}

/// Least-squares slope of ln(values) against time over [t_from, t_to], skipping
/// nonpositive values.
pub fn fit_log_slope(times: &[f64], values: &[f64], t_from: f64, t_to: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        times.iter().zip(values).filter(|(t, v)| **t >= t_from && **t <= t_to && **v > 0.0).map(|(t, v)| (*t, v.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// V(t) at every field snapshot, with v = w - delta and w the forward
/// transform of the logged state.
pub fn lyapunov_series(
    log: &TrajectoryLog,
    tables: &KernelTables,
    weights: &LyapunovWeights,
    delta: &dyn Fn(f64) -> f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dx = 1.0 / tables.nx as f64;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (s, u) in log.field.iter().enumerate() {
        let k = s * log.stride;
        let t = log.times[k];
        let y = DVector::from_column_slice(&log.y[k]);
        let w = tables.transform_profile(u, &y, t)?;
        let d = delta(t);
        let v: Vec<f64> = w.iter().map(|x| x - d).collect();
        let vx = one_sided_gradient(&v, dx);
        let h = log.chain.get(k).ok_or_else(|| Error::Config("log carries no barrier chain".into()))?;
        times.push(t);
        values.push(lyapunov_value(h, &v, &vx, d, &weights.p, weights.a1, weights.a2, dx));
    }
    Ok((times, values))
}

/// max over logged t and i < n of |(h_i(t+dt) - h_i(t))/dt + kappa_i h_i(t) - h_{i+1}(t)|
/// restricted to [t_from, t_to].
pub fn chain_residual(log: &TrajectoryLog, kappas: &[f64], t_from: f64, t_to: f64) -> f64 {
    let n = kappas.len();
    let mut worst = 0.0f64;
    for k in 0..log.len().saturating_sub(1) {
        let t = log.times[k];
        if t < t_from || t > t_to {
            continue;
        }
        let dt = log.times[k + 1] - t;
        for i in 0..n.saturating_sub(1) {
            let r = (log.chain[k + 1][i] - log.chain[k][i]) / dt + kappas[i] * log.chain[k][i] - log.chain[k][i + 1];
            worst = worst.max(r.abs());
        }
    }
    worst
}
