//! Backstepping kernels: the row kernel r(x) from a block matrix exponential,
//! the Goursat kernel k(x,y) by successive approximations, and the boundary
//! series p(x,t).
//!
//! p(0,t) = -f/theta is affine in Y. Its Y-part obeys the same ODE as r, so it
//! is carried by a second row kernel `s` with s(0) = -(df/dY)/theta and s'(0) = 0,
//! and the k boundary condition uses r + s. The Taylor series for p then only
//! sees the explicit time dependence of f, whose derivatives are exact.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::barrier::{build_structural_transform, CbfChain, StructuralTransform};
use crate::error::{Error, Result};
use crate::linalg::{cumtrapz, expm, stencil_derivative, trapz};
use crate::plant::PlantParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelOptions {
    /// Stop when successive iterates differ by less than this in max-norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Trapezoid solutions on spacings h, h/2, .. combined by Richardson
    /// extrapolation; `levels` solutions give error O(h^{2 levels}).
    pub levels: usize,
    /// Number of even-power terms beyond the constant kept in the p series
    /// (x^0 .. x^{2 order}); one time derivative of p(0,t) per term.
    pub p_order: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions { tol: 1e-10, max_iter: 200, levels: 3, p_order: 24 }
    }
}

/// Solution of eps r'' = r (A + cI) with r'(0) = 0 and a given r(0), evaluated
/// through the block exponential of [[0, M, I], [I, 0, 0], [0, 0, 0]],
/// M = (A + cI)/eps, which also yields the running integral of r.
#[derive(Debug, Clone)]
pub struct RowKernel {
    r0: DVector<f64>,
    generator: DMatrix<f64>,
}

impl RowKernel {
    pub fn new(a: &DMatrix<f64>, r0: &DVector<f64>, c: f64, eps: f64) -> RowKernel {
        let n = a.nrows();
        let m = (a + DMatrix::<f64>::identity(n, n) * c) / eps;
        let mut generator = DMatrix::zeros(3 * n, 3 * n);
        generator.view_mut((0, n), (n, n)).copy_from(&m);
        generator.view_mut((0, 2 * n), (n, n)).fill_with_identity();
        generator.view_mut((n, 0), (n, n)).fill_with_identity();
        RowKernel { r0: r0.clone(), generator }
    }

    /// (r(x), r'(x), integral of r over [0, x]).
    pub fn eval(&self, x: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let n = self.r0.len();
        let e = expm(&(&self.generator * x));
        // row vector (r0, 0, 0) times e
        let row = e.rows(0, n).tr_mul(&self.r0);
        (row.rows(0, n).into_owned(), row.rows(n, n).into_owned(), row.rows(2 * n, n).into_owned())
    }
}

/// Samples of a row kernel on a grid.
#[derive(Debug, Clone)]
pub struct RTable {
    pub xs: Vec<f64>,
    pub value: Vec<DVector<f64>>,
    pub d1: Vec<DVector<f64>>,
    /// Second derivative, r(x) M from the defining ODE.
    pub d2: Vec<DVector<f64>>,
    pub integral: Vec<DVector<f64>>,
}

impl RTable {
    fn build(a: &DMatrix<f64>, r0: &DVector<f64>, c: f64, eps: f64, xs: &[f64]) -> RTable {
        let n = a.nrows();
        let kernel = RowKernel::new(a, r0, c, eps);
        let m = (a + DMatrix::<f64>::identity(n, n) * c) / eps;
        let mut t = RTable { xs: xs.to_vec(), value: vec![], d1: vec![], d2: vec![], integral: vec![] };
        for &x in xs {
            let (v, d, i) = kernel.eval(x);
            t.d2.push(m.tr_mul(&v));
            t.value.push(v);
            t.d1.push(d);
            t.integral.push(i);
        }
        t
    }

    pub fn last(&self) -> &DVector<f64> {
        self.value.last().expect("empty r table")
    }
}

/// r(x) with r(0) = -K^T and r'(0) = 0.
pub fn solve_r(a: &DMatrix<f64>, k_row: &DVector<f64>, c: f64, eps: f64, xs: &[f64]) -> RTable {
    RTable::build(a, &(-k_row), c, eps, xs)
}

/// Kernel in Goursat coordinates xi = x + y, eta = x - y on the rectangle
/// [0, 2] x [0, 1] with spacing h; `g[a][b]` is G(a h, b h). The triangle
/// 0 <= y <= x <= 1 is the part with b <= a <= 2N - b.
#[derive(Debug, Clone)]
pub struct GoursatSolution {
    pub n: usize,
    pub h: f64,
    pub g: Vec<Vec<f64>>,
    /// Max-norm increments of the successive approximations.
    pub increments: Vec<f64>,
}

/// Successive approximations G^{k+1} = F + T[G^k] with trapezoid quadrature.
/// `mu` is lambda + c and `source(eta)` the integral of r(m) B over [0, eta].
pub fn solve_goursat(mu: f64, eps: f64, source: &dyn Fn(f64) -> f64, n: usize, tol: f64, max_iter: usize) -> Result<GoursatSolution> {
    let h = 1.0 / n as f64;
    let na = 2 * n + 1;
    let nb = n + 1;
    let src: Vec<f64> = (0..nb).map(|b| source(b as f64 * h) / eps).collect();
    let forcing: Vec<Vec<f64>> = (0..na).map(|a| (0..nb).map(|b| -mu / (4.0 * eps) * (a + b) as f64 * h + src[b]).collect()).collect();

    let mut g = vec![vec![0.0; nb]; na];
    let mut increments = Vec::new();
    let mut j = vec![vec![0.0; nb]; na];
    let mut col = vec![0.0; na];
    let mut c_cum = vec![vec![0.0; nb]; na];
    for _ in 0..max_iter {
        // J(m, eta) = int_0^eta G(m, tau) dtau
        for a in 0..na {
            j[a] = cumtrapz(&g[a], h);
        }
        // diagonal term: int_0^eta J(m, m) dm, m <= eta <= 1
        let diag: Vec<f64> = (0..nb).map(|m| j[m][m]).collect();
        let diag_cum = cumtrapz(&diag, h);
        // C(xi, eta) = int_0^xi J(m, eta) dm
        for b in 0..nb {
            for a in 0..na {
                col[a] = j[a][b];
            }
            let cc = cumtrapz(&col, h);
            for a in 0..na {
                c_cum[a][b] = cc[a];
            }
        }
        let mut inc: f64 = 0.0;
        for a in 0..na {
            for b in 0..nb {
                let next = forcing[a][b] + mu / (2.0 * eps) * diag_cum[b] + mu / (4.0 * eps) * (c_cum[a][b] - c_cum[b][b]);
                inc = inc.max((next - g[a][b]).abs());
                g[a][b] = next;
            }
        }
        increments.push(inc);
        if inc < tol {
            return Ok(GoursatSolution { n, h, g, increments });
        }
    }
    Err(Error::Convergence { iterations: max_iter, increment: *increments.last().unwrap_or(&f64::NAN) })
}

/// Goursat kernel sampled on the plant grid.
#[derive(Debug, Clone)]
pub struct KTable {
    pub nx: usize,
    /// values[i][j] = k(x_i, y_j) for j <= i.
    pub values: Vec<Vec<f64>>,
    pub goursat: GoursatSolution,
}

impl KTable {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    /// k(1, y_j), j = 0..=nx.
    pub fn top_row(&self) -> &[f64] {
        &self.values[self.nx]
    }
}

pub fn solve_k(mu: f64, eps: f64, source: &dyn Fn(f64) -> f64, nx: usize, opts: &KernelOptions) -> Result<KTable> {
    let levels = opts.levels.max(1);
    let mut solutions = Vec::with_capacity(levels);
    for l in 0..levels {
        solutions.push(solve_goursat(mu, eps, source, nx << l, opts.tol, opts.max_iter)?);
    }
    // Romberg table restricted to the coarse nodes
    let mut rows: Vec<Vec<Vec<f64>>> = solutions
        .iter()
        .enumerate()
        .map(|(l, s)| (0..=2 * nx).map(|a| (0..=nx).map(|b| s.g[a << l][b << l]).collect()).collect())
        .collect();
    for j in 1..levels {
        let w = 4f64.powi(j as i32);
        for l in (j..levels).rev() {
            for a in 0..=2 * nx {
                for b in 0..=nx {
                    rows[l][a][b] = (w * rows[l][a][b] - rows[l - 1][a][b]) / (w - 1.0);
                }
            }
        }
    }
    let first = solutions.swap_remove(0);
    let goursat = GoursatSolution { g: rows.pop().expect("at least one level"), ..first };
    // the diagonal is imposed exactly
    let values = (0..=nx)
        .map(|i| (0..=i).map(|j| if j == i { -mu * i as f64 / (nx as f64 * 2.0 * eps) } else { goursat.g[i + j][i - j] }).collect())
        .collect();
    Ok(KTable { nx, values, goursat })
}

/// Boundary series p(x,t) = sum_k x^{2k}/(2k)! D^k p(0,t), D = (d/dt + c)/eps,
/// for the explicit time dependence of p(0,t) = -f/theta.
#[derive(Debug, Clone)]
pub struct PSeries {
    pub chain: CbfChain,
    pub b: f64,
    pub c: f64,
    pub eps: f64,
    pub order: usize,
}

impl PSeries {
    /// Time derivatives of the explicit part of p(0,t), orders 0..=max_order.
    pub fn boundary_derivatives(&self, t: f64, max_order: usize) -> Result<Vec<f64>> {
        let theta = self.chain.spec.dh_dy1(t)?;
        let scale = -1.0 / (theta * self.b);
        match self.chain.f_time_derivatives(t, max_order) {
            Ok(d) => Ok(d.into_iter().map(|v| v * scale).collect()),
            Err(Error::PartialMissing { order }) => {
                // psi^{(order)} missing means p(0,.) is known up to order - n - 1
                let available = order.saturating_sub(self.chain.n() + 1);
                Err(Error::Order { requested: max_order, available })
            }
            Err(e) => Err(e),
        }
    }

    pub fn eval(&self, x: f64, t: f64) -> Result<(f64, f64)> {
        let d = self.boundary_derivatives(t, self.order)?;
        solve_p(&|_, j| d.get(j).copied(), self.c, self.eps, x, t, self.order)
    }

    /// d/dt of the truncated series, from one extra boundary derivative.
    pub fn eval_dt(&self, x: f64, t: f64) -> Result<f64> {
        let d = self.boundary_derivatives(t, self.order + 1)?;
        Ok(solve_p(&|_, j| d.get(j + 1).copied(), self.c, self.eps, x, t, self.order)?.0)
    }
}

/// Truncated Taylor series of the solution of p_t = eps p_xx - c p,
/// p_x(0,t) = 0, from the time derivatives of p(0,t). Odd coefficients vanish
/// and p_x^{(m+2)}(0,t) = (d/dt + c) p_x^{(m)}(0,t) / eps. Terms x^{2k} for
/// k = 0..=order are kept. Returns the value and the remainder estimate
/// |last term| * e.
pub fn solve_p(boundary: &dyn Fn(f64, usize) -> Option<f64>, c: f64, eps: f64, x: f64, t: f64, order: usize) -> Result<(f64, f64)> {
    let levels = order;
    let mut derivs = Vec::with_capacity(levels + 1);
    for j in 0..=levels {
        match boundary(t, j) {
            Some(v) => derivs.push(v),
            None => return Err(Error::Order { requested: order, available: j.saturating_sub(1) }),
        }
    }
    // D^k applied to p(0,.) via the binomial expansion of (d/dt + c)^k.
    let mut sum = 0.0;
    let mut last = 0.0;
    let mut binom = vec![1.0f64];
    let mut x_pow = 1.0;
    let mut fact = 1.0;
    for k in 0..=levels {
        if k > 0 {
            let mut next = vec![1.0; k + 1];
            for i in 1..k {
                next[i] = binom[i - 1] + binom[i];
            }
            binom = next;
            x_pow *= x * x;
            fact *= ((2 * k - 1) * (2 * k)) as f64;
        }
        let dk: f64 = (0..=k).map(|i| binom[i] * c.powi((k - i) as i32) * derivs[i]).sum::<f64>() / eps.powi(k as i32);
        last = x_pow / fact * dk;
        sum += last;
    }
    Ok((sum, last.abs() * std::f64::consts::E))
}

/// Everything the backstepping controller needs for one parameter value.
#[derive(Debug, Clone)]
pub struct KernelTables {
    pub lambda: f64,
    pub b: f64,
    pub c: f64,
    pub eps: f64,
    pub nx: usize,
    pub transform: StructuralTransform,
    /// Row kernel with r(0) = -K^T.
    pub r: RTable,
    /// Row kernel carrying the Y-part of p.
    pub s: RTable,
    pub k: KTable,
    pub p: PSeries,
    pub options: KernelOptions,
}

impl KernelTables {
    /// Builds all kernels for `params` (true values or an estimate).
    pub fn build(params: &PlantParams, chain: &CbfChain, c: f64, nx: usize, opts: &KernelOptions) -> Result<KernelTables> {
        if !(c > 0.0) {
            return Err(Error::Domain(format!("c must be positive, got {c}")));
        }
        let transform = build_structural_transform(&params.a, params.b)?;
        let theta = chain.spec.dh_dy1(0.0)?;
        let n = params.n();
        let xs: Vec<f64> = (0..=nx).map(|i| i as f64 / nx as f64).collect();
        let r = solve_r(&params.a, &transform.k_row, c, params.eps, &xs);
        // p(0,t) = -(f_Z . Tz Y + explicit(t)) / (theta b)
        let s0 = -transform.tz.tr_mul(chain.f_coeffs()) / (theta * params.b);
        let s = RTable::build(&params.a, &s0, c, params.eps, &xs);

        let total0 = -&transform.k_row + &s0;
        let feedback = RowKernel::new(&params.a, &total0, c, params.eps);
        let b_last = params.b;
        let source = move |eta: f64| feedback.eval(eta).2[n - 1] * b_last;
        let k = solve_k(params.lambda + c, params.eps, &source, nx, opts)?;
        let p = PSeries { chain: chain.clone(), b: params.b, c, eps: params.eps, order: opts.p_order };
        Ok(KernelTables { lambda: params.lambda, b: params.b, c, eps: params.eps, nx, transform, r, s, k, p, options: *opts })
    }

    /// (r + s)(x_i).
    pub fn feedback_row(&self, i: usize) -> DVector<f64> {
        &self.r.value[i] + &self.s.value[i]
    }

    /// Integral of k(1, y) u(y) by trapezoid on the plant grid.
    pub fn boundary_integral(&self, u: &[f64]) -> f64 {
        let prod: Vec<f64> = self.k.top_row().iter().zip(u).map(|(k, u)| k * u).collect();
        trapz(&prod, 1.0 / self.nx as f64)
    }

    /// Explicit-time part of p(1,t) with its remainder estimate.
    pub fn p_explicit(&self, x: f64, t: f64) -> Result<(f64, f64)> {
        self.p.eval(x, t)
    }

    /// Full p(x_i, t) = s(x_i) Y + explicit part.
    pub fn p_at(&self, i: usize, y: &DVector<f64>, t: f64) -> Result<f64> {
        Ok(self.s.value[i].dot(y) + self.p.eval(i as f64 / self.nx as f64, t)?.0)
    }

    /// w = u - int_0^x k(x,y) u(y) dy - r(x) Y - p(x,t) on the plant grid.
    pub fn transform_profile(&self, u: &[f64], y: &DVector<f64>, t: f64) -> Result<Vec<f64>> {
        let h = 1.0 / self.nx as f64;
        let mut w = Vec::with_capacity(self.nx + 1);
        let mut prod = Vec::with_capacity(self.nx + 1);
        for i in 0..=self.nx {
            prod.clear();
            prod.extend((0..=i).map(|j| self.k.at(i, j) * u[j]));
            let integral = trapz(&prod, h);
            w.push(u[i] - integral - self.r.value[i].dot(y) - self.p_at(i, y, t)?);
        }
        Ok(w)
    }
}

/// Max-norm residuals of the kernel equations on the tables' grid.
#[derive(Debug, Clone, Serialize)]
pub struct KernelResiduals {
    pub nx: usize,
    /// |k(x,x) + (lambda + c) x / (2 eps)|
    pub diagonal: f64,
    /// |eps k_xx - eps k_yy - (lambda + c) k| on the triangle
    pub kernel_pde: f64,
    /// |k_y(x,0) + (r + s)(x) B / eps|
    pub kernel_boundary: f64,
    /// |eps r'' - r (A + cI)| for r and s
    pub r_ode: f64,
    pub r_initial: f64,
    /// |p_t - eps p_xx + c p| over the sampled times
    pub p_pde: f64,
    pub p_times: Vec<f64>,
    pub goursat_iterations: usize,
    pub goursat_increments: Vec<f64>,
}

/// Stencil widths for the residual derivatives (eighth order).
const D1: usize = 9;
const D2: usize = 10;
const P_SAMPLES: usize = 200;

pub fn kernel_residuals(tables: &KernelTables, a: &DMatrix<f64>, p_times: &[f64]) -> Result<KernelResiduals> {
    let nx = tables.nx;
    let h = 1.0 / nx as f64;
    let eps = tables.eps;
    let mu = tables.lambda + tables.c;
    let n = a.nrows();

    let diagonal = (0..=nx).map(|i| (tables.k.at(i, i) + mu * i as f64 * h / (2.0 * eps)).abs()).fold(0.0, f64::max);

    // Goursat form: eps (k_xx - k_yy) = 4 eps G_{xi eta}.
    let gs = &tables.k.goursat;
    let na = 2 * nx + 1;
    let nb = nx + 1;
    let g_eta: Vec<Vec<f64>> = (0..na).map(|a| (0..nb).map(|b| stencil_derivative(&gs.g[a], h, b, 1, D1)).collect()).collect();
    let mut kernel_pde: f64 = 0.0;
    let mut kernel_boundary: f64 = 0.0;
    let b_last = tables.b;
    for b in 0..nb {
        let col: Vec<f64> = (0..na).map(|a| g_eta[a][b]).collect();
        let gcol: Vec<f64> = (0..na).map(|a| gs.g[a][b]).collect();
        for a in b..(na - b) {
            let mixed = stencil_derivative(&col, h, a, 1, D1);
            kernel_pde = kernel_pde.max((4.0 * eps * mixed - mu * gs.g[a][b]).abs());
        }
        // boundary y = 0 is the line a = b
        let a = b;
        let k_y = stencil_derivative(&gcol, h, a, 1, D1) - g_eta[a][b];
        let rho = tables.feedback_row(b)[n - 1] * b_last;
        kernel_boundary = kernel_boundary.max((k_y + rho / eps).abs());
    }

    let m = (a + DMatrix::<f64>::identity(n, n) * tables.c) / eps;
    let mut r_ode: f64 = 0.0;
    for table in [&tables.r, &tables.s] {
        for comp in 0..n {
            let vals: Vec<f64> = table.value.iter().map(|v| v[comp]).collect();
            for i in 0..=nx {
                let d2 = stencil_derivative(&vals, h, i, 2, D2);
                let rhs = m.tr_mul(&table.value[i])[comp];
                r_ode = r_ode.max((d2 - rhs).abs() * eps);
            }
        }
    }
    let r_initial = (&tables.r.value[0] + &tables.transform.k_row).amax().max(tables.r.d1[0].amax());

    // p does not depend on the kernel grid; sample it on its own fine grid
    let mut p_pde: f64 = 0.0;
    let hp = 1.0 / P_SAMPLES as f64;
    for &t in p_times {
        let vals: Vec<f64> = (0..=P_SAMPLES).map(|i| tables.p.eval(i as f64 * hp, t).map(|v| v.0)).collect::<Result<_>>()?;
        for (i, v) in vals.iter().enumerate() {
            let pt = tables.p.eval_dt(i as f64 * hp, t)?;
            let pxx = stencil_derivative(&vals, hp, i, 2, D2);
            p_pde = p_pde.max((pt - eps * pxx + tables.c * v).abs());
        }
    }

    Ok(KernelResiduals {
        nx,
        diagonal,
        kernel_pde,
        kernel_boundary,
        r_ode,
        r_initial,
        p_pde,
        p_times: p_times.to_vec(),
        goursat_iterations: gs.increments.len(),
        goursat_increments: gs.increments.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::BarrierSpec;
    use crate::plant::case1_params;

    #[test]
    fn r_starts_at_minus_k() {
        let p = case1_params();
        let t = build_structural_transform(&p.a, p.b).unwrap();
        let r = solve_r(&p.a, &t.k_row, 3.0, 1.0, &[0.0, 0.5, 1.0]);
        assert!((&r.value[0] + &t.k_row).amax() < 1e-15);
        assert!(r.d1[0].amax() < 1e-15);
    }

    #[test]
    fn scalar_r_is_cosh() {
        let a = DMatrix::from_row_slice(1, 1, &[2.0]);
        let k = DVector::from_column_slice(&[0.7]);
        let (c, eps) = (3.0, 1.5);
        let xs: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let r = solve_r(&a, &k, c, eps, &xs);
        let w = ((2.0 + c) / eps).sqrt();
        for (x, v) in xs.iter().zip(&r.value) {
            assert!((v[0] + 0.7 * (w * x).cosh()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_data_gives_zero_kernel() {
        let opts = KernelOptions::default();
        let k = solve_k(0.0, 1.0, &|_| 0.0, 10, &opts).unwrap();
        assert!(k.values.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn iteration_cap_reported() {
        let opts = KernelOptions { max_iter: 2, ..Default::default() };
        assert!(matches!(solve_k(13.0, 1.0, &|_| 0.0, 10, &opts), Err(Error::Convergence { .. })));
    }

    #[test]
    fn p_order_needs_derivatives() {
        let only_two = |_t: f64, j: usize| if j < 2 { Some(1.0) } else { None };
        assert!(matches!(solve_p(&only_two, 3.0, 1.0, 0.5, 0.0, 8), Err(Error::Order { requested: 8, available: 1 })));
        assert!(solve_p(&only_two, 3.0, 1.0, 0.5, 0.0, 1).is_ok());
    }

    #[test]
    fn p_steady_boundary_is_cosh() {
        let (c, eps, p0) = (3.0, 1.0, 2.0);
        let steady = |_t: f64, j: usize| Some(if j == 0 { p0 } else { 0.0 });
        for &x in &[0.0, 0.3, 1.0] {
            let (v, _) = solve_p(&steady, c, eps, x, 0.7, 8).unwrap();
            assert!((v - p0 * (x * (c / eps).sqrt()).cosh()).abs() < 1e-8);
        }
    }

    #[test]
    fn p_decaying_boundary_is_exact() {
        let (c, eps, q0): (f64, f64, f64) = (3.0, 1.0, 1.5);
        let bd = |t: f64, j: usize| Some(q0 * (-c).powi(j as i32) * (-c * t).exp());
        let (v, rem) = solve_p(&bd, c, eps, 1.0, 0.4, 10).unwrap();
        assert!((v - q0 * (-c * 0.4f64).exp()).abs() < 1e-14);
        assert!(rem < 1e-14);
    }

    #[test]
    fn zero_state_tables_vanish_for_zero_data() {
        // integrator plant, K = 0, lambda + c = 0, h = y1 at rest: all kernels zero
        let mut p = case1_params();
        p.a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        p.lambda = -3.0;
        p.theta_box.lambda_min = -5.0;
        let chain = CbfChain::new(&BarrierSpec::output(1.0, 1.0), &[2.0, 3.0], 1.0).unwrap();
        let tables = KernelTables::build(&p, &chain, 3.0, 10, &KernelOptions::default()).unwrap();
        assert!(tables.r.value.iter().all(|v| v.amax() == 0.0));
        assert_eq!(tables.p.eval(1.0, 0.2).unwrap().0, 0.0);
        // s carries f's Y-part, which is nonzero for kappa > 0
        assert!(tables.s.value[0].amax() > 0.0);
    }
}
