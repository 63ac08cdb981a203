//! Manufactured solutions, discrete energy budgets and the elementary adjoint
//! estimates, shared by the tests and the experiment runner.

use nalgebra::DMatrix;

use crate::discretization::{assemble_operator, BcFamily, Channel, SpatialGrid, TimeGrid};
use crate::solvers::{
    derivative_at, Forcing, KdvSolver, LinearProblem, SolverError, StateTrajectory, TracePosition,
};

/// Which system a manufactured-solution run exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmsCase {
    Forward(BcFamily),
    Adjoint(BcFamily),
    Nonlinear(BcFamily),
}

/// Exact solution `a(1+t)·sin(πx/L)` and its derivatives.
struct Exact {
    k: f64,
    a: f64,
}

impl Exact {
    fn y(&self, x: f64, t: f64) -> f64 {
        self.a * (1.0 + t) * (self.k * x).sin()
    }
    fn yx(&self, x: f64, t: f64) -> f64 {
        self.a * (1.0 + t) * self.k * (self.k * x).cos()
    }
    fn yxx(&self, x: f64, t: f64) -> f64 {
        -self.a * (1.0 + t) * self.k * self.k * (self.k * x).sin()
    }
    fn yxxx(&self, x: f64, t: f64) -> f64 {
        -self.a * (1.0 + t) * self.k.powi(3) * (self.k * x).cos()
    }
    fn yt(&self, x: f64) -> f64 {
        self.a * (self.k * x).sin()
    }
}

/// Weighted L² error of the manufactured solution at the far end of the march.
///
/// The nonlinear case runs at amplitude 0.1 so the inner fixed-point sweeps
/// contract at `dt = dx`.
pub fn manufactured_error(case: MmsCase, n_x: usize, n_t: usize, length: f64, horizon: f64) -> Result<f64, SolverError> {
    let grid = SpatialGrid::new(length, n_x)?;
    let tgrid = TimeGrid::new(horizon, n_t)?;
    let nonlinear = matches!(case, MmsCase::Nonlinear(_));
    let ex = Exact { k: std::f64::consts::PI / length, a: if nonlinear { 0.1 } else { 1.0 } };
    let xs = grid.nodes();
    let ts = tgrid.times();
    let f = DMatrix::from_fn(ts.len(), xs.len(), |k, i| {
        let (x, t) = (xs[i], ts[k]);
        let mut v = ex.yt(x) + ex.yx(x, t) + ex.yxxx(x, t);
        if nonlinear {
            v += ex.y(x, t) * ex.yx(x, t);
        }
        v
    });
    let l = length;
    let signal = |g: &dyn Fn(f64) -> f64| ts.iter().map(|&t| g(t)).collect::<Vec<f64>>();
    let (family, problem) = match case {
        MmsCase::Forward(fam) | MmsCase::Nonlinear(fam) => {
            let y0 = grid.sample(|x| ex.y(x, 0.0));
            let mut p = LinearProblem::forward(grid, tgrid, fam, y0).with_forcing(Forcing::Nodal(f));
            let data: [Vec<f64>; 3] = match fam {
                BcFamily::A => [signal(&|t| ex.y(0.0, t)), signal(&|t| ex.yx(l, t)), signal(&|t| ex.yxx(l, t))],
                BcFamily::B => [signal(&|t| ex.y(0.0, t)), signal(&|t| ex.y(l, t)), signal(&|t| ex.yx(l, t))],
            };
            for (ch, d) in Channel::ALL.into_iter().zip(data) {
                p = p.with_boundary(ch, d);
            }
            (fam, p)
        }
        MmsCase::Adjoint(fam) => {
            let yt = grid.sample(|x| ex.y(x, horizon));
            let mut p = LinearProblem::adjoint(grid, tgrid, fam, yt).with_forcing(Forcing::Nodal(f));
            let last: Vec<f64> = match fam {
                BcFamily::A => signal(&|t| ex.y(l, t) + ex.yxx(l, t)),
                BcFamily::B => signal(&|t| ex.y(l, t)),
            };
            let data = [signal(&|t| ex.y(0.0, t)), signal(&|t| ex.yx(0.0, t)), last];
            for (ch, d) in Channel::ALL.into_iter().zip(data) {
                p = p.with_boundary(ch, d);
            }
            (fam, p)
        }
    };
    let solver = KdvSolver::new(grid, tgrid, family, 0.5)?;
    let (traj, t_eval, level) = match case {
        MmsCase::Forward(_) => (solver.forward_linear(&problem)?, horizon, n_t),
        MmsCase::Nonlinear(_) => (solver.forward_nonlinear(&problem, 1e-11)?, horizon, n_t),
        MmsCase::Adjoint(_) => (solver.adjoint(&problem)?, 0.0, 0),
    };
    let exact = grid.sample(|x| ex.y(x, t_eval));
    let err = traj.state(level) - exact;
    Ok(grid.norm(err.as_slice()))
}

/// Errors on `n_x = n_t = n` for each `n`, and the observed orders between
/// consecutive refinements.
pub fn convergence_study(case: MmsCase, sizes: &[usize]) -> Result<(Vec<f64>, Vec<f64>), SolverError> {
    let errors = sizes.iter().map(|&n| manufactured_error(case, n, n, 1.0, 1.0)).collect::<Result<Vec<_>, _>>()?;
    let orders = errors
        .windows(2)
        .zip(sizes.windows(2))
        .map(|(e, n)| (e[0] / e[1]).ln() / (n[1] as f64 / n[0] as f64).ln())
        .collect();
    Ok((errors, orders))
}

/// Boundary flux in `d/dt ‖y‖² = flux` for homogeneous data.
///
/// Forward A: `-(y(L)² + y_x(0)²)`; forward B: `-u_x(0)²`. For the adjoint
/// systems, in forward time: A `ψ(L)² + ψ_x(L)²`, B `ν_x(L)²`.
pub fn energy_flux(state: &[f64], grid: &SpatialGrid, family: BcFamily, adjoint: bool) -> f64 {
    let d = |order, pos| derivative_at(state, grid, order, pos).expect("valid order and position");
    match (family, adjoint) {
        (BcFamily::A, false) => -(d(0, TracePosition::Right).powi(2) + d(1, TracePosition::Left).powi(2)),
        (BcFamily::B, false) => -d(1, TracePosition::Left).powi(2),
        (BcFamily::A, true) => d(0, TracePosition::Right).powi(2) + d(1, TracePosition::Right).powi(2),
        (BcFamily::B, true) => d(1, TracePosition::Right).powi(2),
    }
}

/// Per-step residuals of the discrete energy balance.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyBudget {
    /// `|E_{k+1} - E_k - dt·F((y_k + y_{k+1})/2)|`.
    pub defects: Vec<f64>,
    /// Whether both end states of the step satisfy the homogeneous boundary
    /// rows. Data that violates them is projected on the first step, which
    /// is not an energy-conserving operation.
    pub admissible: Vec<bool>,
}

impl EnergyBudget {
    pub fn max_admissible(&self) -> f64 {
        self.defects.iter().zip(&self.admissible).filter(|(_, &a)| a).map(|(d, _)| *d).fold(0.0, f64::max)
    }
}

pub fn energy_defects(traj: &StateTrajectory, adjoint: bool) -> EnergyBudget {
    let dt = traj.tgrid.dt();
    let op = assemble_operator(&traj.grid, traj.family, adjoint);
    let in_domain: Vec<bool> =
        (0..traj.tgrid.n_levels()).map(|k| op.constraint_residual(traj.state(k).as_slice()) < 1e-10).collect();
    let defects = (0..traj.tgrid.n_t())
        .map(|k| {
            let mid = (traj.state(k) + traj.state(k + 1)) * 0.5;
            let flux = energy_flux(mid.as_slice(), &traj.grid, traj.family, adjoint);
            (traj.energy(k + 1) - traj.energy(k) - dt * flux).abs()
        })
        .collect();
    EnergyBudget { defects, admissible: (0..traj.tgrid.n_t()).map(|k| in_domain[k] && in_domain[k + 1]).collect() }
}

/// Both sides of `‖ψ(T)‖² ≤ (1/T)∫‖ψ‖² + (boundary observation energy)` for an
/// adjoint trajectory: family A observes `ψ(L)` and `ψ_x(L)`, family B
/// observes `ν_x(L)`.
pub fn terminal_estimate(traj: &StateTrajectory) -> (f64, f64) {
    let wt = traj.tgrid.weights();
    let trace_sq = |order: usize| -> f64 {
        (0..traj.tgrid.n_levels())
            .map(|k| {
                let row: Vec<f64> = traj.samples.row(k).iter().copied().collect();
                wt[k] * derivative_at(&row, &traj.grid, order, TracePosition::Right).expect("valid").powi(2)
            })
            .sum()
    };
    let bulk = traj.l2l2_sq() / traj.tgrid.horizon();
    let boundary = match traj.family {
        BcFamily::A => trace_sq(0) + trace_sq(1),
        BcFamily::B => trace_sq(1),
    };
    (traj.energy(traj.tgrid.n_t()), bulk + boundary)
}

/// `φ(x,t) = ψ(L-x, T-t)`, which maps the right-end adjoint system onto its
/// left-end mirror image.
pub fn reflect(traj: &StateTrajectory) -> StateTrajectory {
    let (r, c) = traj.samples.shape();
    StateTrajectory { samples: DMatrix::from_fn(r, c, |k, i| traj.samples[(r - 1 - k, c - 1 - i)]), ..traj.clone() }
}

/// Both sides of `‖φ(0)‖² ≤ (1/T)∫‖φ‖² + ‖φ_x(0,·)‖² + ‖φ(0,·)‖²`.
pub fn initial_estimate(traj: &StateTrajectory) -> (f64, f64) {
    let wt = traj.tgrid.weights();
    let trace_sq = |order: usize| -> f64 {
        (0..traj.tgrid.n_levels())
            .map(|k| {
                let row: Vec<f64> = traj.samples.row(k).iter().copied().collect();
                wt[k] * derivative_at(&row, &traj.grid, order, TracePosition::Left).expect("valid").powi(2)
            })
            .sum()
    };
    (traj.energy(0), traj.l2l2_sq() / traj.tgrid.horizon() + trace_sq(0) + trace_sq(1))
}
