//! Closed-loop time stepping and the trajectory log.

use std::io::Write;
use std::path::Path;

use crate::barrier::{CbfChain, StructuralTransform};
use crate::controller::Controller;
use crate::error::{Error, Result};
use crate::plant::{step_into, Grid, PlantParams, SimState};

/// Observer called after every step with the pre-step state, the applied
/// input and the post-step state.
pub trait Tap {
    fn observe(&mut self, k: usize, before: &SimState, u: f64, after: &SimState) -> Result<()>;
}

/// Row k holds the state at t_k and the input applied on [t_k, t_k + dt).
/// The last row repeats the final state with the input the controller would
/// apply there.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryLog {
    pub n: usize,
    pub times: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub u0: Vec<f64>,
    pub u1: Vec<f64>,
    pub u_cmd: Vec<f64>,
    /// h(y1, t) and the chain h_1..h_n; empty when no chain is attached.
    pub h: Vec<f64>,
    pub chain: Vec<Vec<f64>>,
    pub lambda_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub xs: Vec<f64>,
    pub stride: usize,
    pub field_times: Vec<f64>,
    pub field: Vec<Vec<f64>>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn write_trajectory_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n).map(|i| format!("y{i}")));
        header.extend(["u0", "u1_boundary", "U", "h"].map(String::from));
        header.extend((1..=self.n).map(|i| format!("h{i}")));
        header.extend(["lambda_hat", "b_hat"].map(String::from));
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k]];
            row.extend(&self.y[k]);
            row.extend([self.u0[k], self.u1[k], self.u_cmd[k], self.h.get(k).copied().unwrap_or(f64::NAN)]);
            match self.chain.get(k) {
                Some(c) => row.extend(c),
                None => row.extend(std::iter::repeat_n(f64::NAN, self.n)),
            }
            row.extend([self.lambda_hat[k], self.b_hat[k]]);
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per snapshot; the header carries the x grid.
    pub fn write_field_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "t")?;
        for x in &self.xs {
            write!(f, ",{x}")?;
        }
        writeln!(f)?;
        for (t, u) in self.field_times.iter().zip(&self.field) {
            write!(f, "{t}")?;
            for v in u {
                write!(f, ",{v}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }

    /// Snapshot index holding time t_k of the main log, if stored.
    pub fn field_at_step(&self, k: usize) -> Option<&Vec<f64>> {
        if k.is_multiple_of(self.stride) {
            self.field.get(k / self.stride)
        } else {
            None
        }
    }
}

/// Everything a row needs besides the state.
struct RowExtras {
    estimate: (f64, f64),
}

fn push_row(
    log: &mut TrajectoryLog,
    k: usize,
    s: &SimState,
    u: f64,
    extras: &RowExtras,
    chain: Option<(&CbfChain, &StructuralTransform)>,
) -> Result<()> {
    log.times.push(s.t);
    log.y.push(s.y.iter().copied().collect());
    log.u0.push(s.u0());
    log.u1.push(s.u1());
    log.u_cmd.push(u);
    log.lambda_hat.push(extras.estimate.0);
    log.b_hat.push(extras.estimate.1);
    if let Some((chain, tr)) = chain {
        log.h.push(chain.spec.h(s.y[0], s.t)?);
        let z = tr.z_of(&s.y);
        log.chain.push(chain.eval(&z, s.t)?.iter().copied().collect());
    }
    if k.is_multiple_of(log.stride) {
        log.field_times.push(s.t);
        log.field.push(s.u.clone());
    }
    Ok(())
}

fn drive(
    s0: &SimState,
    p: &PlantParams,
    grid: &Grid,
    stride: usize,
    taps: &mut [&mut dyn Tap],
    chain: Option<(&CbfChain, &StructuralTransform)>,
    mut law: impl FnMut(usize, &SimState) -> Result<(f64, RowExtras)>,
) -> Result<TrajectoryLog> {
    if stride == 0 {
        return Err(Error::Config("snapshot stride must be positive".into()));
    }
    let steps = grid.steps();
    let mut log = TrajectoryLog { n: p.n(), xs: grid.xs(), stride, ..Default::default() };
    let mut s = s0.clone();
    let mut next = s0.clone();
    for k in 0..=steps {
        let (u, extras) = law(k, &s)?;
        if !u.is_finite() {
            return Err(Error::NonFinite { t: s.t, what: "controller output".into() });
        }
        push_row(&mut log, k, &s, u, &extras, chain)?;
        if k == steps {
            break;
        }
        step_into(&s, &mut next, u, p, grid)?;
        next.t = (k + 1) as f64 * grid.dt;
        for tap in taps.iter_mut() {
            tap.observe(k, &s, u, &next)?;
        }
        std::mem::swap(&mut s, &mut next);
    }
    Ok(log)
}

/// Steps the plant to `t_final`, calling `controller` on each pre-step state.
pub fn run_closed_loop(
    s0: &SimState,
    p: &PlantParams,
    grid: &Grid,
    controller: &mut dyn FnMut(usize, &SimState) -> Result<f64>,
    taps: &mut [&mut dyn Tap],
    stride: usize,
) -> Result<TrajectoryLog> {
    let est = (p.lambda, p.b);
    drive(s0, p, grid, stride, taps, None, |k, s| Ok((controller(k, s)?, RowExtras { estimate: est })))
}

/// Closed loop with a full controller; the log also carries the barrier chain
/// (through the true structural transform) and the estimates in force.
pub fn run_controller(
    s0: &SimState,
    p: &PlantParams,
    grid: &Grid,
    ctrl: &mut Controller,
    transform: &StructuralTransform,
    taps: &mut [&mut dyn Tap],
    stride: usize,
) -> Result<TrajectoryLog> {
    let chain = ctrl.chain.clone();
    drive(s0, p, grid, stride, taps, Some((&chain, transform)), |k, s| {
        let u = ctrl.control(k, s)?;
        Ok((u, RowExtras { estimate: ctrl.estimate() }))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{case1_params, init_state};

    struct Boundary(Vec<(f64, f64)>);

    impl Tap for Boundary {
        fn observe(&mut self, _k: usize, _b: &SimState, u: f64, after: &SimState) -> Result<()> {
            self.0.push((u, after.u1()));
            Ok(())
        }
    }

    #[test]
    fn zero_loop_stays_zero() {
        let p = case1_params();
        let grid = Grid::new(10, 1e-3, 0.2, p.eps).unwrap();
        let s0 = init_state(&grid, |_| 0.0, &[0.0, 0.0], 2).unwrap();
        let log = run_closed_loop(&s0, &p, &grid, &mut |_, _| Ok(0.0), &mut [], 1).unwrap();
        assert_eq!(log.len(), grid.steps() + 1);
        assert!(log.y.iter().flatten().chain(log.field.iter().flatten()).all(|v| *v == 0.0));
    }

    #[test]
    fn boundary_equals_applied_input() {
        let p = case1_params();
        let grid = Grid::new(10, 1e-3, 0.05, p.eps).unwrap();
        let s0 = init_state(&grid, |x| x * (1.0 - x), &[1.0, 0.0], 2).unwrap();
        let mut tap = Boundary(Vec::new());
        let mut law = |k: usize, s: &SimState| Ok((k as f64).sin() - s.u0());
        run_closed_loop(&s0, &p, &grid, &mut law, &mut [&mut tap], 3).unwrap();
        assert!(tap.0.iter().all(|(u, b)| u == b));
    }

    #[test]
    fn stride_controls_snapshots() {
        let p = case1_params();
        let grid = Grid::new(10, 1e-3, 0.1, p.eps).unwrap();
        let s0 = init_state(&grid, |_| 0.0, &[0.0, 0.0], 2).unwrap();
        let log = run_closed_loop(&s0, &p, &grid, &mut |_, _| Ok(0.0), &mut [], 10).unwrap();
        assert_eq!(log.field.len(), 11);
        assert!(log.field_at_step(20).is_some() && log.field_at_step(21).is_none());
        assert!(run_closed_loop(&s0, &p, &grid, &mut |_, _| Ok(0.0), &mut [], 0).is_err());
    }
}
