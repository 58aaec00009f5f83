//! Barrier functions of the output y1, the change of coordinates Z = Tz Y,
//! the high-relative-degree CBF chain h_1..h_n and the gain conditions that
//! make every link of the chain start positive.
//!
//! Built-in barriers are affine in y1, `h(y1,t) = theta*y1 + g(t)`, with a
//! time profile `g` whose derivatives are known in closed form. The chain is
//! then affine in Z and every partial derivative is exact.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::check_companion;

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralTransform {
    /// varrho[i-1][j-1] holds varrho_{i,j}, j <= i.
    pub varrho: Vec<Vec<f64>>,
    pub tz: DMatrix<f64>,
    /// Row vector K^T stored as a column.
    pub k_row: DVector<f64>,
    pub b: f64,
}

impl StructuralTransform {
    pub fn n(&self) -> usize {
        self.tz.nrows()
    }

    pub fn z_of(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.tz * y
    }

    /// Shift matrix A_z.
    pub fn a_z(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| if j == i + 1 { 1.0 } else { 0.0 })
    }
}

/// Bidiagonal A_h with -kappa_i on the diagonal and ones above it.
pub fn a_h(kappas: &[f64]) -> DMatrix<f64> {
    let n = kappas.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            -kappas[i]
        } else if j == i + 1 {
            1.0
        } else {
            0.0
        }
    })
}

pub fn build_structural_transform(a: &DMatrix<f64>, b: f64) -> Result<StructuralTransform> {
    check_companion(a)?;
    if !(b > 0.0) {
        return Err(Error::Sign(b));
    }
    let n = a.nrows();
    // 1-based accessor to keep the recursion readable.
    let at = |i: usize, j: usize| a[(i - 1, j - 1)];
    let mut varrho: Vec<Vec<f64>> = Vec::with_capacity(n);
    varrho.push(vec![at(1, 1)]);
    for i in 2..=n {
        let prev = &varrho[i - 2];
        let rp = |j: usize| prev[j - 1];
        let mut row = vec![0.0; i];
        row[0] = at(i, 1) + (1..i).map(|j| rp(j) * at(j, 1)).sum::<f64>();
        for iota in 2..i {
            row[iota - 1] = at(i, iota) + rp(iota - 1) + (iota..i).map(|j| rp(j) * at(j, iota)).sum::<f64>();
        }
        row[i - 1] = at(i, i) + rp(i - 1);
        varrho.push(row);
    }
    let mut tz = DMatrix::<f64>::identity(n, n);
    for i in 1..n {
        for j in 0..i {
            tz[(i, j)] = varrho[i - 1][j];
        }
    }
    let k_row = DVector::from_iterator(n, varrho[n - 1].iter().map(|v| v / b));
    Ok(StructuralTransform { varrho, tz, k_row, b })
}

/// Recovery offset added to h when the output starts outside the safe set.
pub fn sigma_eval(t: f64, h0: f64, t_a: f64, beta: f64) -> f64 {
    sigma_derivative(t, 0, h0, t_a, beta)
}

/// Exact `order`-th derivative of the recovery bump. It is identically zero
/// in the safe branch and for t >= t_a, where every derivative vanishes.
pub fn sigma_derivative(t: f64, order: usize, h0: f64, t_a: f64, beta: f64) -> f64 {
    sigma_derivatives(t, order, h0, t_a, beta)[order]
}

/// sigma and its derivatives of order 0..=max_order at t.
pub fn sigma_derivatives(t: f64, max_order: usize, h0: f64, t_a: f64, beta: f64) -> Vec<f64> {
    let mut out = vec![0.0; max_order + 1];
    if h0 > 0.0 || t >= t_a {
        return out;
    }
    let amplitude = (1.0 / (t_a * t_a)).exp() * (beta - h0);
    let v = 1.0 / (t - t_a);
    let lv = v.abs().ln();
    let mut poly = vec![1.0];
    for (k, slot) in out.iter_mut().enumerate() {
        if k > 0 {
            poly = bump_polynomial_step(&poly);
        }
        // e^{-v^2} P_k(v), summed term by term in log form so that huge powers
        // of v next to t_a never meet an underflowed exponential as inf * 0.
        let mut acc = 0.0;
        for (m, c) in poly.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            let sign = if v < 0.0 && m % 2 == 1 { -c.signum() } else { c.signum() };
            acc += sign * (c.abs().ln() + m as f64 * lv - v * v).exp();
        }
        *slot = amplitude * acc;
    }
    out
}

/// P_{k+1} from P_k, where d^k/dt^k e^{-1/(t-t_a)^2} = e^{-v^2} P_k(v), v = 1/(t-t_a).
fn bump_polynomial_step(p: &[f64]) -> Vec<f64> {
    let mut next = vec![0.0; p.len() + 3];
    for (m, c) in p.iter().enumerate() {
        next[m + 3] += 2.0 * c;
        if m > 0 {
            next[m + 1] -= m as f64 * c;
        }
    }
    next
}

pub type ProfileFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Time-dependent part g(t) of an affine barrier.
#[derive(Clone)]
pub enum TimeProfile {
    Zero,
    /// g(t) = a e^{-d t}
    Exponential {
        a: f64,
        d: f64,
    },
    /// User-registered derivatives; index m holds d^m g / dt^m.
    Registered(Vec<ProfileFn>),
}

impl fmt::Debug for TimeProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeProfile::Zero => write!(f, "Zero"),
            TimeProfile::Exponential { a, d } => write!(f, "Exponential {{ a: {a}, d: {d} }}"),
            TimeProfile::Registered(v) => write!(f, "Registered({} partials)", v.len()),
        }
    }
}

impl TimeProfile {
    pub fn derivative(&self, t: f64, order: usize) -> Result<f64> {
        match self {
            TimeProfile::Zero => Ok(0.0),
            TimeProfile::Exponential { a, d } => Ok(a * (-d).powi(order as i32) * (-d * t).exp()),
            TimeProfile::Registered(fs) => fs.get(order).map(|f| f(t)).ok_or(Error::PartialMissing { order }),
        }
    }
}

/// Barrier family name and numeric parameters, as written in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BarrierConfig {
    /// h = y1
    Output,
    /// h = a e^{-d t} - y1
    ExpEnvelope { a: f64, d: f64 },
}

#[derive(Debug, Clone)]
pub struct BarrierSpec {
    /// dh/dy1, constant for affine barriers.
    pub theta: f64,
    pub profile: TimeProfile,
    pub t_a: f64,
    pub beta: f64,
}

impl BarrierSpec {
    pub fn output(t_a: f64, beta: f64) -> BarrierSpec {
        BarrierSpec { theta: 1.0, profile: TimeProfile::Zero, t_a, beta }
    }

    pub fn exp_envelope(a: f64, d: f64, t_a: f64, beta: f64) -> BarrierSpec {
        BarrierSpec { theta: -1.0, profile: TimeProfile::Exponential { a, d }, t_a, beta }
    }

    /// Affine barrier theta*y1 + g(t) with user-supplied derivatives of g.
    pub fn registered(theta: f64, partials: Vec<ProfileFn>, t_a: f64, beta: f64) -> Result<BarrierSpec> {
        let spec = BarrierSpec { theta, profile: TimeProfile::Registered(partials), t_a, beta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_config(cfg: &BarrierConfig, t_a: f64, beta: f64) -> Result<BarrierSpec> {
        let spec = match cfg {
            BarrierConfig::Output => BarrierSpec::output(t_a, beta),
            BarrierConfig::ExpEnvelope { a, d } => BarrierSpec::exp_envelope(*a, *d, t_a, beta),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta == 0.0 || !self.theta.is_finite() {
            return Err(Error::ThetaZero(0.0));
        }
        if !(self.t_a > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Domain(format!("t_a and beta must be positive, got {} and {}", self.t_a, self.beta)));
        }
        Ok(())
    }

    pub fn h(&self, y1: f64, t: f64) -> Result<f64> {
        Ok(self.theta * y1 + self.profile.derivative(t, 0)?)
    }

    /// dh/dy1 along a trajectory; errors where it vanishes.
    pub fn dh_dy1(&self, t: f64) -> Result<f64> {
        if self.theta == 0.0 {
            return Err(Error::ThetaZero(t));
        }
        Ok(self.theta)
    }

    pub fn theta_sign(&self) -> f64 {
        self.theta.signum()
    }
}

/// The chain h_1..h_n and f written as affine functions of Z:
/// h_i = coeffs[i-1] . Z + sum_m time_mix[i-1][m] psi^{(m)}(t), with
/// psi = g + sigma. Entry n holds b*f.
#[derive(Debug, Clone)]
pub struct CbfChain {
    pub spec: BarrierSpec,
    pub kappas: Vec<f64>,
    /// h(y1(0), 0), which selects the sigma branch.
    pub h0: f64,
    coeffs: Vec<DVector<f64>>,
    time_mix: Vec<Vec<f64>>,
}

impl CbfChain {
    pub fn new(spec: &BarrierSpec, kappas: &[f64], h0: f64) -> Result<CbfChain> {
        spec.validate()?;
        let n = kappas.len();
        if n == 0 {
            return Err(Error::Dimension("need at least one gain".into()));
        }
        let mut coeffs = Vec::with_capacity(n + 1);
        let mut time_mix = Vec::with_capacity(n + 1);
        let mut c = DVector::zeros(n);
        c[0] = spec.theta;
        let mut d = vec![1.0];
        coeffs.push(c.clone());
        time_mix.push(d.clone());
        for &kappa in kappas.iter() {
            // sum_j dh_i/dz_j z_{j+1}: shift the Z coefficients by one; the
            // z_{n+1} overflow term belongs to the input channel and is dropped.
            let mut nc = DVector::zeros(n);
            for j in 0..n - 1 {
                nc[j + 1] = c[j];
            }
            nc += kappa * &c;
            let mut nd = vec![0.0; d.len() + 1];
            for (m, v) in d.iter().enumerate() {
                nd[m + 1] += v;
                nd[m] += kappa * v;
            }
            c = nc;
            d = nd;
            coeffs.push(c.clone());
            time_mix.push(d.clone());
        }
        Ok(CbfChain { spec: spec.clone(), kappas: kappas.to_vec(), h0, coeffs, time_mix })
    }

    pub fn n(&self) -> usize {
        self.kappas.len()
    }

    /// psi^{(m)}(t) = g^{(m)}(t) + sigma^{(m)}(t).
    pub fn psi(&self, t: f64, order: usize) -> Result<f64> {
        Ok(self.spec.profile.derivative(t, order)? + sigma_derivative(t, order, self.h0, self.spec.t_a, self.spec.beta))
    }

    /// psi^{(m)}(t) for m = 0..=max_order.
    pub fn psi_all(&self, t: f64, max_order: usize) -> Result<Vec<f64>> {
        let mut out = sigma_derivatives(t, max_order, self.h0, self.spec.t_a, self.spec.beta);
        for (m, v) in out.iter_mut().enumerate() {
            *v += self.spec.profile.derivative(t, m)?;
        }
        Ok(out)
    }

    /// Time part of b*f and its derivatives of order 0..=max_order.
    pub fn f_time_derivatives(&self, t: f64, max_order: usize) -> Result<Vec<f64>> {
        let mix = &self.time_mix[self.n()];
        let psi = self.psi_all(t, max_order + mix.len() - 1)?;
        Ok((0..=max_order).map(|k| mix.iter().enumerate().map(|(m, w)| w * psi[m + k]).sum()).collect())
    }

    fn time_part(&self, level: usize, t: f64, extra_order: usize) -> Result<f64> {
        let mut acc = 0.0;
        for (m, w) in self.time_mix[level].iter().enumerate() {
            if *w != 0.0 {
                acc += w * self.psi(t, m + extra_order)?;
            }
        }
        Ok(acc)
    }

    /// (h_1, ..., h_n) at (Z, t).
    pub fn eval(&self, z: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let n = self.n();
        let mut h = DVector::zeros(n);
        for i in 0..n {
            h[i] = self.coeffs[i].dot(z) + self.time_part(i, t, 0)?;
        }
        Ok(h)
    }

    /// Z coefficients of b*f.
    pub fn f_coeffs(&self) -> &DVector<f64> {
        &self.coeffs[self.n()]
    }

    /// Time part of b*f differentiated `order` times.
    pub fn f_time_derivative(&self, t: f64, order: usize) -> Result<f64> {
        self.time_part(self.n(), t, order)
    }

    pub fn f(&self, z: &DVector<f64>, t: f64, b_est: f64) -> Result<f64> {
        if b_est == 0.0 {
            return Err(Error::DivideByZero("f evaluated with b = 0".into()));
        }
        Ok((self.f_coeffs().dot(z) + self.f_time_derivative(t, 0)?) / b_est)
    }

    /// Bracket of the kappa-hat formula for link i (1-based, i < n):
    /// sum_{j<=i} dh_i/dz_j z_{j+1} + dh_i/dt.
    fn drift(&self, i: usize, z: &DVector<f64>, t: f64) -> Result<f64> {
        let n = self.n();
        let c = &self.coeffs[i - 1];
        let mut acc = 0.0;
        for j in 0..n - 1 {
            acc += c[j] * z[j + 1];
        }
        Ok(acc + self.time_part(i - 1, t, 1)?)
    }
}

pub fn cbf_chain_eval(spec: &BarrierSpec, kappas: &[f64], h0: f64, z: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    CbfChain::new(spec, kappas, h0)?.eval(z, t)
}

pub fn f_term_eval(spec: &BarrierSpec, kappas: &[f64], h0: f64, z: &DVector<f64>, t: f64, b_est: f64) -> Result<f64> {
    CbfChain::new(spec, kappas, h0)?.f(z, t, b_est)
}

/// Margin added above max(0, kappa-hat) when gains are auto-selected.
pub const KAPPA_MARGIN: f64 = 1.0;

/// Validates user gains against kappa_i > max(0, kappa-hat_i) (i < n) and
/// 0 < kappa_n <= c, or picks gains automatically when none are given.
pub fn select_kappas(spec: &BarrierSpec, z0: &DVector<f64>, c: f64, user: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = z0.len();
    if !(c > 0.0) {
        return Err(Error::Gain { index: n, reason: format!("decay rate c must be positive, got {c}") });
    }
    if let Some(k) = user {
        if k.len() != n {
            return Err(Error::Dimension(format!("{} gains for an order-{n} chain", k.len())));
        }
    }
    let h0 = spec.h(z0[0], 0.0)?;
    let mut kappas: Vec<f64> = match user {
        Some(k) => k.to_vec(),
        None => vec![c; n],
    };
    for i in 1..n {
        let chain = CbfChain::new(spec, &kappas, h0)?;
        let h = chain.eval(z0, 0.0)?;
        let hi = h[i - 1];
        if !(hi > 0.0) {
            return Err(Error::Gain { index: i, reason: format!("h_{i}(0) = {hi} is not positive") });
        }
        let hat = -chain.drift(i, z0, 0.0)? / hi;
        let floor = hat.max(0.0);
        match user {
            Some(_) => {
                if !(kappas[i - 1] > floor) {
                    return Err(Error::Gain { index: i, reason: format!("kappa_{i} = {} must exceed max(0, {hat})", kappas[i - 1]) });
                }
            }
            None => kappas[i - 1] = floor + KAPPA_MARGIN,
        }
    }
    let last = kappas[n - 1];
    if !(last > 0.0) || last > c {
        return Err(Error::Gain { index: n, reason: format!("kappa_{n} = {last} must lie in (0, c = {c}]") });
    }
    let chain = CbfChain::new(spec, &kappas, h0)?;
    let h = chain.eval(z0, 0.0)?;
    if let Some(i) = h.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::Gain { index: i + 1, reason: format!("h_{}(0) = {} is not positive", i + 1, h[i]) });
    }
    Ok(kappas)
}
