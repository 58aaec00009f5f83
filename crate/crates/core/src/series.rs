//! Eigenfunction series of the target system on cos((pi/2 + j pi) x) modes,
//! the alternating heat series used for the drive amplitude bounds, and
//! their tail bounds.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{adaptive_simpson, trapz};

/// Frequency of mode j: pi/2 + j pi.
pub fn mode_frequency(j: usize) -> f64 {
    FRAC_PI_2 + j as f64 * PI
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CoeffKind {
    /// 2 * int f cos(nu_j x): expansion coefficients, f = sum theta_j cos(nu_j x).
    Theta,
    /// int f cos(nu_j x), without the factor 2.
    ThetaAcute,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeCoeffs {
    pub kind: CoeffKind,
    pub values: Vec<f64>,
    /// sqrt(int f^2 / 2), a bound on |int f cos(nu_j x)| for every j.
    pub coefficient_bound: f64,
}

impl ModeCoeffs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Expansion coefficients regardless of the stored convention.
    pub fn expansion(&self, j: usize) -> f64 {
        match self.kind {
            CoeffKind::Theta => self.values[j],
            CoeffKind::ThetaAcute => 2.0 * self.values[j],
        }
    }
}

/// Trapezoid projections of a profile sampled on a uniform grid of [0, 1].
pub fn fourier_coeffs(profile: &[f64], kind: CoeffKind, count: usize) -> ModeCoeffs {
    let n = profile.len() - 1;
    let h = 1.0 / n as f64;
    let scale = match kind {
        CoeffKind::Theta => 2.0,
        CoeffKind::ThetaAcute => 1.0,
    };
    let mut buf = vec![0.0; n + 1];
    let values = (0..count)
        .map(|j| {
            let nu = mode_frequency(j);
            for (i, (b, f)) in buf.iter_mut().zip(profile).enumerate() {
                *b = f * (nu * i as f64 * h).cos();
            }
            scale * trapz(&buf, h)
        })
        .collect();
    let sq: Vec<f64> = profile.iter().map(|v| v * v).collect();
    ModeCoeffs { kind, values, coefficient_bound: (0.5 * trapz(&sq, h)).sqrt() }
}

/// Bound on sum_{j >= count} e^{-eps nu_j^2 t} for t > 0.
pub fn heat_tail_bound(eps: f64, t: f64, count: usize) -> f64 {
    if t <= 0.0 {
        return f64::INFINITY;
    }
    let nu = mode_frequency(count);
    let ratio = (-eps * PI * PI * (2 * count + 2) as f64 * t).exp();
    (-eps * nu * nu * t).exp() / (1.0 - ratio)
}

/// 2 sum_j e^{-eps nu_j^2 t} acute_j with a bound on the omitted modes.
pub fn mode_heat_sum(acute: &ModeCoeffs, eps: f64, t: f64) -> (f64, f64) {
    let value: f64 = (0..acute.len())
        .map(|j| {
            let nu = mode_frequency(j);
            (-eps * nu * nu * t).exp() * acute.expansion(j)
        })
        .sum();
    let tail = 2.0 * acute.coefficient_bound * heat_tail_bound(eps, t, acute.len());
    (value, tail)
}

/// Partial sum of sum_j (-1)^j e^{-(2j+1)^2 x} / (2j+1) over `count` terms and
/// the Leibniz bound (first omitted term).
pub fn alt_theta_sum(x: f64, count: usize) -> Result<(f64, f64)> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("alternating theta sum needs x > 0, got {x}")));
    }
    let term = |j: usize| {
        let m = (2 * j + 1) as f64;
        (-m * m * x).exp() / m
    };
    let value = (0..count).map(|j| if j % 2 == 0 { term(j) } else { -term(j) }).sum();
    Ok((value, term(count)))
}

/// L(x) = pi/4 - sum_j (-1)^j e^{-(2j+1)^2 x} / (2j+1), strictly inside
/// (0, pi/4) for x > 0. `value` underflows for x below about 1.6e-4, so the
/// logarithm is carried alongside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaGap {
    pub value: f64,
    pub ln_value: f64,
    pub tail: f64,
}

/// Below this x the direct sum loses L to cancellation and the transformed
/// series L(x) = (pi/2) sum_{m odd} chi(m) erfc(pi m / (4 sqrt x)) is used,
/// chi(m) = +1, -1 for m = 1, 3 mod 4.
const GAP_SWITCH: f64 = 0.25;

pub fn theta_gap(x: f64, count: usize) -> Result<ThetaGap> {
    if x >= GAP_SWITCH {
        let (v, tail) = alt_theta_sum(x, count)?;
        let value = FRAC_PI_4 - v;
        return Ok(ThetaGap { value, ln_value: value.ln(), tail });
    }
    if !(x > 0.0) {
        return Err(Error::Domain(format!("theta gap needs x > 0, got {x}")));
    }
    let z = PI / (4.0 * x.sqrt());
    // ln erfc(m z) for m = 1, 3, 5; the m = 7 term is below e^{-48 z^2}
    // relative to the first and is bounded as the tail.
    let l1 = ln_erfc(z);
    let r3 = (ln_erfc(3.0 * z) - l1).exp();
    let r5 = (ln_erfc(5.0 * z) - l1).exp();
    let ln_value = (PI / 2.0).ln() + l1 + (1.0 - r3 + r5).ln();
    let tail = (PI / 2.0) * (ln_erfc(7.0 * z)).exp();
    Ok(ThetaGap { value: ln_value.exp(), ln_value, tail })
}

/// ln erfc(z) for z >= 0, by a continued fraction for the scaled function
/// once erfc itself would lose range.
fn ln_erfc(z: f64) -> f64 {
    if z < 5.0 {
        return libm::erfc(z).ln();
    }
    // erfc(z) = e^{-z^2}/sqrt(pi) * 1/(z + (1/2)/(z + 1/(z + (3/2)/(z + ...))))
    let mut frac = z;
    for k in (1..60).rev() {
        frac = z + 0.5 * k as f64 / frac;
    }
    -z * z - 0.5 * PI.ln() - frac.ln()
}

/// 2 sum_j e^{-eps nu_j^2 t} (-1)^j / nu_j, which is 1 at t = 0.
pub fn alt_heat_sum(eps: f64, t: f64, count: usize) -> Result<(f64, f64)> {
    let (v, tail) = alt_theta_sum(eps * PI * PI * t / 4.0, count)?;
    Ok((4.0 / PI * v, 4.0 / PI * tail))
}

/// S(tau) = theta [sign(theta) - 2 sign0 sum_j e^{-eps nu_j^2 tau} (-1)^j / nu_j],
/// returned with its truncation bound. Written through L so that the
/// matched-sign case keeps its exponentially small positive value.
pub fn safe_drive_check(tau: f64, eps: f64, theta: f64, sign0: f64, count: usize) -> Result<(f64, f64)> {
    let gap = theta_gap(eps * PI * PI * tau / 4.0, count)?;
    let scale = theta.abs() * 4.0 / PI;
    if theta.signum() == sign0.signum() {
        Ok((scale * gap.value, scale * gap.tail))
    } else {
        Ok((theta.abs() + scale * (FRAC_PI_4 - gap.value), scale * gap.tail))
    }
}

/// Series solution of w_t = eps w_xx - c w, w_x(0,t) = 0, w(1,t) = g(t).
///
/// `theta` holds the expansion of w(., 0) - g(0); `forcing` is c g + g', or
/// None when it vanishes (g = M e^{-ct}).
pub fn target_w_eval(
    x: f64,
    t: f64,
    theta: &ModeCoeffs,
    boundary: &dyn Fn(f64) -> f64,
    forcing: Option<&dyn Fn(f64) -> f64>,
    eps: f64,
    c: f64,
) -> f64 {
    let mut w = boundary(t);
    for j in 0..theta.len() {
        let nu = mode_frequency(j);
        let rate = eps * nu * nu + c;
        let mut vj = (-rate * t).exp() * theta.expansion(j);
        if let Some(f) = forcing {
            if t > 0.0 {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                let conv = adaptive_simpson(&|tau| (-rate * (t - tau)).exp() * f(tau), 0.0, t, 1e-10);
                vj -= 2.0 * sign / nu * conv;
            }
        }
        w += vj * (nu * x).cos();
    }
    w
}
