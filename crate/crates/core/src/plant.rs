//! The reaction-diffusion PDE coupled to a companion-form ODE through u(0,t),
//! actuated by Dirichlet input at x = 1, and its explicit time stepper.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Known rectangle containing the unknown (lambda, b).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBox {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub b_min: f64,
    pub b_max: f64,
}

impl ParamBox {
    pub fn contains(&self, lambda: f64, b: f64) -> bool {
        lambda >= self.lambda_min && lambda <= self.lambda_max && b >= self.b_min && b <= self.b_max
    }

    pub fn clamp_lambda(&self, lambda: f64) -> f64 {
        lambda.clamp(self.lambda_min, self.lambda_max)
    }

    pub fn clamp_b(&self, b: f64) -> f64 {
        b.clamp(self.b_min, self.b_max)
    }

    /// Corners plus centre, the sampling used wherever a max over the box is needed.
    pub fn samples(&self) -> Vec<(f64, f64)> {
        let lc = 0.5 * (self.lambda_min + self.lambda_max);
        let bc = 0.5 * (self.b_min + self.b_max);
        let mut out = Vec::with_capacity(9);
        for l in [self.lambda_min, lc, self.lambda_max] {
            for b in [self.b_min, bc, self.b_max] {
                out.push((l, b));
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if !(self.b_min > 0.0) {
            return Err(Error::Box(format!("lower bound on b must be positive, got {}", self.b_min)));
        }
        if self.b_min > self.b_max || self.lambda_min > self.lambda_max {
            return Err(Error::Box("empty parameter box".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantParams {
    pub a: DMatrix<f64>,
    pub b: f64,
    pub eps: f64,
    pub lambda: f64,
    pub theta_box: ParamBox,
}

impl PlantParams {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input vector B = (0, ..., 0, b).
    pub fn b_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.n());
        v[self.n() - 1] = self.b;
        v
    }

    /// Same plant with (lambda, b) replaced, e.g. by an estimate. No validation.
    pub fn with_theta(&self, lambda: f64, b: f64) -> PlantParams {
        PlantParams { lambda, b, ..self.clone() }
    }
}

/// Checks companion structure, positivity of b and box membership.
pub fn validate_params(p: PlantParams) -> Result<PlantParams> {
    check_companion(&p.a)?;
    if !(p.b > 0.0) {
        return Err(Error::Sign(p.b));
    }
    if !(p.eps > 0.0) {
        return Err(Error::Domain(format!("diffusivity must be positive, got {}", p.eps)));
    }
    p.theta_box.validate()?;
    if !p.theta_box.contains(p.lambda, p.b) {
        return Err(Error::Box(format!(
            "(lambda, b) = ({}, {}) outside [{}, {}] x [{}, {}]",
            p.lambda, p.b, p.theta_box.lambda_min, p.theta_box.lambda_max, p.theta_box.b_min, p.theta_box.b_max
        )));
    }
    Ok(p)
}

pub(crate) fn check_companion(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::Structure(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
    }
    let n = a.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let want = if j == i + 1 { 1.0 } else { 0.0 };
            if a[(i, j)] != want {
                return Err(Error::Structure(format!("A[{i}][{j}] = {} but must be {want}", a[(i, j)])));
            }
        }
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Structure("non-finite entry".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub nx: usize,
    pub dt: f64,
    pub t_final: f64,
}

impl Grid {
    /// Builds a grid and enforces the explicit-scheme bound eps*dt/dx^2 <= 1/2.
    pub fn new(nx: usize, dt: f64, t_final: f64, eps: f64) -> Result<Grid> {
        if nx < 2 {
            return Err(Error::Grid(format!("need at least 2 cells, got {nx}")));
        }
        if !(dt > 0.0) || !(t_final >= 0.0) {
            return Err(Error::Grid(format!("dt = {dt}, t_final = {t_final}")));
        }
        let g = Grid { nx, dt, t_final };
        let ratio = eps * dt / (g.dx() * g.dx());
        if ratio > 0.5 + 1e-12 {
            return Err(Error::Grid(format!("stability ratio eps*dt/dx^2 = {ratio} exceeds 1/2")));
        }
        Ok(g)
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..=self.nx).map(|i| i as f64 * self.dx()).collect()
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    /// Number of steps in `period`; errors unless dt divides it exactly.
    pub fn steps_per(&self, period: f64) -> Result<usize> {
        let k = period / self.dt;
        let r = k.round();
        if r < 1.0 || (k - r).abs() > 1e-9 * k.max(1.0) {
            return Err(Error::Grid(format!("dt = {} does not divide period {period}", self.dt)));
        }
        Ok(r as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub u: Vec<f64>,
    pub y: DVector<f64>,
    pub t: f64,
}

impl SimState {
    pub fn u0(&self) -> f64 {
        self.u[0]
    }

    pub fn u1(&self) -> f64 {
        self.u[self.u.len() - 1]
    }
}

pub fn init_state(grid: &Grid, u0: impl Fn(f64) -> f64, y0: &[f64], n: usize) -> Result<SimState> {
    if y0.len() != n {
        return Err(Error::Dimension(format!("Y0 has length {} but the ODE has dimension {n}", y0.len())));
    }
    let u: Vec<f64> = grid.xs().into_iter().map(u0).collect();
    if u.iter().chain(y0).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { t: 0.0, what: "initial condition".into() });
    }
    Ok(SimState { u, y: DVector::from_column_slice(y0), t: 0.0 })
}

/// One explicit step: FTCS in the interior, ghost-node Neumann at x = 0,
/// Dirichlet `u_in` at x = 1, forward Euler for the ODE driven by the
/// pre-step u(0,t).
pub fn step(s: &SimState, u_in: f64, p: &PlantParams, grid: &Grid) -> Result<SimState> {
    let mut next = s.clone();
    step_into(s, &mut next, u_in, p, grid)?;
    Ok(next)
}

pub(crate) fn step_into(s: &SimState, next: &mut SimState, u_in: f64, p: &PlantParams, grid: &Grid) -> Result<()> {
    let nx = grid.nx;
    let dt = grid.dt;
    let dx = grid.dx();
    let diff = p.eps * dt / (dx * dx);
    let react = p.lambda * dt;
    let u = &s.u;
    let out = &mut next.u;
    out[0] = u[0] + diff * 2.0 * (u[1] - u[0]) + react * u[0];
    for i in 1..nx {
        out[i] = u[i] + diff * (u[i + 1] - 2.0 * u[i] + u[i - 1]) + react * u[i];
    }
    out[nx] = u_in;

    let n = p.n();
    let ay = &p.a * &s.y;
    for i in 0..n {
        let forcing = if i == n - 1 { p.b * u[0] } else { 0.0 };
        next.y[i] = s.y[i] + dt * (ay[i] + forcing);
    }
    next.t = s.t + dt;

    if !u_in.is_finite() {
        return Err(Error::NonFinite { t: next.t, what: "boundary input".into() });
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { t: next.t, what: "PDE state".into() });
    }
    if next.y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { t: next.t, what: "ODE state".into() });
    }
    Ok(())
}

/// Case-1 plant used throughout the tests and the bundled scenarios.
pub fn case1_params() -> PlantParams {
    PlantParams {
        a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, -1.0]),
        b: 5.0,
        eps: 1.0,
        lambda: 10.0,
        theta_box: ParamBox { lambda_min: 8.0, lambda_max: 12.0, b_min: 3.0, b_max: 7.0 },
    }
}
