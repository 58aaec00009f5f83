use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use pdecbf::barrier::{build_structural_transform, select_kappas, sigma_derivative, sigma_eval, BarrierSpec, CbfChain};
use pdecbf::identifier::{update_estimate, LsSystem};
use pdecbf::kernels::{solve_goursat, KernelOptions, KernelTables};
use pdecbf::plant::{case1_params, init_state, step, Grid, ParamBox, PlantParams};
use pdecbf::series::theta_gap;

fn companion(lower: &[f64]) -> (usize, DMatrix<f64>) {
    // n (n + 1) / 2 free entries on and below the diagonal
    let n = ((((8 * lower.len() + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    let mut a = DMatrix::zeros(n, n);
    let mut it = lower.iter();
    for i in 0..n {
        for j in 0..=i {
            a[(i, j)] = *it.next().unwrap();
        }
        if i + 1 < n {
            a[(i, i + 1)] = 1.0;
        }
    }
    (n, a)
}

fn free_plant(lambda: f64) -> PlantParams {
    let mut p = case1_params();
    p.lambda = lambda;
    p.theta_box = ParamBox { lambda_min: -50.0, lambda_max: 50.0, b_min: 1.0, b_max: 10.0 };
    p
}

/// Max error of the scheme against e^{(lambda - eps nu^2) t} cos(nu x) with U = 0.
fn eigenmode_error(nx: usize, ratio: f64, t_final: f64) -> f64 {
    let p = free_plant(2.0);
    let dx = 1.0 / nx as f64;
    let dt = ratio * dx * dx / p.eps;
    let steps = (t_final / dt).round() as usize;
    let grid = Grid::new(nx, dt, steps as f64 * dt, p.eps).unwrap();
    let nu = 1.5 * PI;
    let mut s = init_state(&grid, |x| (nu * x).cos(), &[0.0, 0.0], 2).unwrap();
    for _ in 0..steps {
        s = step(&s, 0.0, &p, &grid).unwrap();
    }
    let decay = ((p.lambda - p.eps * nu * nu) * s.t).exp();
    grid.xs().iter().zip(&s.u).map(|(x, u)| (u - decay * (nu * x).cos()).abs()).fold(0.0, f64::max)
}

#[test]
fn heat_eigenmode_second_order_in_space() {
    let e1 = eigenmode_error(20, 0.2, 0.1);
    let e2 = eigenmode_error(40, 0.2, 0.1);
    let e3 = eigenmode_error(80, 0.2, 0.1);
    // the coarsest pair is still pre-asymptotic
    assert!(e1 / e2 > 3.5 && e1 / e2 < 5.0, "{e1} {e2}");
    assert!((e2 / e3 - 4.0).abs() < 0.5, "{e2} {e3}");
}

#[test]
fn goursat_increments_contract() {
    let s = solve_goursat(13.0, 1.0, &|eta| 5.0 * eta, 20, 1e-12, 200).unwrap();
    let logs: Vec<f64> = s.increments.iter().filter(|v| **v > 0.0).map(|v| v.ln()).collect();
    let n = logs.len() as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = logs.iter().sum::<f64>() / n;
    let num: f64 = logs.iter().enumerate().map(|(i, y)| (i as f64 - mean_x) * (y - mean_y)).sum();
    let den: f64 = (0..logs.len()).map(|i| (i as f64 - mean_x).powi(2)).sum();
    assert!(logs.len() > 3 && num / den < 0.0);
}

#[test]
fn kernels_continuous_in_lambda() {
    let p = case1_params();
    let spec = BarrierSpec::output(1.0, 1.0);
    let chain = CbfChain::new(&spec, &[23.0, 3.0], 10.0).unwrap();
    let opts = KernelOptions::default();
    let a = KernelTables::build(&p, &chain, 3.0, 20, &opts).unwrap();
    let b = KernelTables::build(&p.with_theta(p.lambda + 1e-6, p.b), &chain, 3.0, 20, &opts).unwrap();
    let dk = a.k.values.iter().flatten().zip(b.k.values.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(dk > 0.0 && dk < 1e-5, "{dk}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_state_is_fixed(lambda in -20.0f64..20.0, nx in 5usize..40) {
        let p = free_plant(lambda);
        let dt = 0.4 / (nx * nx) as f64;
        let grid = Grid::new(nx, dt, 10.0 * dt, p.eps).unwrap();
        let s = init_state(&grid, |_| 0.0, &[0.0, 0.0], 2).unwrap();
        let next = step(&s, 0.0, &p, &grid).unwrap();
        prop_assert!(next.u.iter().all(|v| *v == 0.0));
        prop_assert!(next.y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn norm_non_increasing_without_reaction(coeffs in prop::collection::vec(-1.0f64..1.0, 4)) {
        let p = free_plant(0.0);
        let nx = 20;
        let dt = 0.4 / (nx * nx) as f64;
        let grid = Grid::new(nx, dt, 200.0 * dt, p.eps).unwrap();
        let profile = |x: f64| -> f64 {
            coeffs.iter().enumerate().map(|(j, c)| c * ((j as f64 + 0.5) * PI * x).cos()).sum()
        };
        let mut s = init_state(&grid, profile, &[0.0, 0.0], 2).unwrap();
        let norm = |u: &[f64]| u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut prev = norm(&s.u);
        for _ in 0..200 {
            s = step(&s, 0.0, &p, &grid).unwrap();
            let cur = norm(&s.u);
            prop_assert!(cur <= prev * (1.0 + 1e-12));
            prev = cur;
        }
    }

    #[test]
    fn structural_transform_identity(entries in prop::collection::vec(-3.0f64..3.0, 6), b in 0.5f64..8.0) {
        let (n, a) = companion(&entries);
        prop_assert_eq!(n, 3);
        let t = build_structural_transform(&a, b).unwrap();
        let az = t.a_z();
        let mut e_n = DVector::zeros(n);
        e_n[n - 1] = 1.0;
        let lhs = &t.tz * &a - &az * &t.tz;
        let rhs = &e_n * (t.k_row.transpose() * b);
        prop_assert!((lhs - rhs).amax() < 1e-12);
        prop_assert_eq!(&t.tz * &e_n, e_n.clone());
        let y = DVector::from_fn(n, |i, _| entries[i] + 0.3);
        prop_assert_eq!(t.z_of(&y)[0], y[0]);
    }

    #[test]
    fn gains_make_chain_positive(y1 in -20.0f64..20.0, y2 in -20.0f64..20.0, c in 0.5f64..5.0, envelope in any::<bool>()) {
        let p = case1_params();
        let spec = if envelope { BarrierSpec::exp_envelope(14.0, 3.0, 1.0, 4.0) } else { BarrierSpec::output(1.0, 1.0) };
        let t = build_structural_transform(&p.a, p.b).unwrap();
        let z0 = t.z_of(&DVector::from_vec(vec![y1, y2]));
        let kappas = select_kappas(&spec, &z0, c, None).unwrap();
        let chain = CbfChain::new(&spec, &kappas, spec.h(y1, 0.0).unwrap()).unwrap();
        let h = chain.eval(&z0, 0.0).unwrap();
        prop_assert!(h.iter().all(|v| *v > 0.0), "{:?} {:?}", kappas, h);
    }

    #[test]
    fn sigma_vanishes_outside_support(t in 0.0f64..5.0, h0 in -30.0f64..30.0, beta in 0.5f64..5.0) {
        let t_a = 1.0;
        if h0 > 0.0 || t >= t_a {
            for order in 0..6 {
                prop_assert_eq!(sigma_derivative(t, order, h0, t_a, beta), 0.0);
            }
        } else {
            prop_assert!(sigma_eval(0.0, h0, t_a, beta) + h0 > 0.0);
        }
    }

    #[test]
    fn estimate_stays_in_box(
        h1 in -100.0f64..100.0, q1 in 0.0f64..10.0, h2 in -100.0f64..100.0, q2 in 0.0f64..10.0,
        l0 in 8.0f64..12.0, b0 in 3.0f64..7.0,
    ) {
        let bx = ParamBox { lambda_min: 8.0, lambda_max: 12.0, b_min: 3.0, b_max: 7.0 };
        let sys = [LsSystem { mode: 1, h1, q1, h2, q2 }];
        let up = update_estimate((l0, b0), &sys, &bx, 1e-9, 0.05).unwrap();
        prop_assert!(bx.contains(up.lambda, up.b));
        if q1 <= 1e-9 { prop_assert_eq!(up.lambda, l0); }
        if q2 <= 1e-9 { prop_assert_eq!(up.b, b0); }
        // clamping twice changes nothing
        prop_assert_eq!(bx.clamp_lambda(up.lambda), up.lambda);
        prop_assert_eq!(bx.clamp_b(up.b), up.b);
    }

    #[test]
    fn exact_data_recovered(lambda in 8.0f64..12.0, b in 3.0f64..7.0, q1 in 0.1f64..10.0, q2 in 0.1f64..10.0) {
        let bx = ParamBox { lambda_min: 8.0, lambda_max: 12.0, b_min: 3.0, b_max: 7.0 };
        let sys = [LsSystem { mode: 1, h1: lambda * q1, q1, h2: b * q2, q2 }];
        let up = update_estimate((8.0, 7.0), &sys, &bx, 1e-9, 0.05).unwrap();
        prop_assert!((up.lambda - lambda).abs() < 1e-12 && (up.b - b).abs() < 1e-12);
    }

    #[test]
    fn gap_tail_contains_refined_value(x in 1e-4f64..10.0, terms in 1usize..32) {
        let coarse = theta_gap(x, terms).unwrap();
        let fine = theta_gap(x, 4 * terms + 64).unwrap();
        prop_assert!((coarse.value - fine.value).abs() <= coarse.tail + 1e-15);
        prop_assert!(coarse.value < std::f64::consts::FRAC_PI_4);
        prop_assert!(coarse.ln_value.is_finite());
    }
}
