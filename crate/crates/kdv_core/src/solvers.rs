//! Forward, adjoint and nonlinear marching on the θ-scheme, plus boundary traces.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::discretization::{
    assemble_operator, stencil, BcFamily, Channel, GridError, SpatialGrid, ThetaStepper, TimeGrid,
};

/// Inner sweeps allowed per step before the nonlinear solve gives up.
pub const MAX_INNER_SWEEPS: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{what}: expected {expected} entries, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("problem grids, family or theta differ from the ones this solver was built for")]
    Mismatch,
    #[error("problem direction is {0:?}, this solver needs the other one")]
    WrongDirection(Direction),
    #[error(
        "nonlinear inner iteration stalled at step {step} after {sweeps} sweeps \
         (amplitude {amplitude:.3e}); data too large for the local regime"
    )]
    InnerDiverged { step: usize, sweeps: usize, amplitude: f64 },
    #[error("trace position {x} lies outside [0, {length}]")]
    TracePosition { x: f64, length: f64 },
    #[error("trace derivative order {0} not supported (0, 1 or 2)")]
    TraceOrder(usize),
}

/// Time-sampled boundary datum with the Sobolev index of the space it lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    pub tgrid: TimeGrid,
    pub samples: Vec<f64>,
    pub sobolev_index: f64,
    pub channel: Option<Channel>,
}

impl ControlSignal {
    pub fn new(tgrid: TimeGrid, samples: Vec<f64>, sobolev_index: f64, channel: Option<Channel>) -> Result<Self, SolverError> {
        if samples.len() != tgrid.n_levels() {
            return Err(SolverError::Shape { what: "control samples", expected: tgrid.n_levels(), got: samples.len() });
        }
        Ok(Self { tgrid, samples, sobolev_index, channel })
    }

    pub fn zeros(tgrid: TimeGrid, family: BcFamily, channel: Channel) -> Self {
        Self {
            tgrid,
            samples: vec![0.0; tgrid.n_levels()],
            sobolev_index: natural_index(family, channel),
            channel: Some(channel),
        }
    }

    pub fn from_fn(tgrid: TimeGrid, family: BcFamily, channel: Channel, f: impl Fn(f64) -> f64) -> Self {
        Self {
            tgrid,
            samples: tgrid.times().into_iter().map(f).collect(),
            sobolev_index: natural_index(family, channel),
            channel: Some(channel),
        }
    }

    /// Trapezoid L²(0,T) norm.
    pub fn l2_norm(&self) -> f64 {
        let w = self.tgrid.weights();
        crate::discretization::weighted_dot(&w, &self.samples, &self.samples).sqrt()
    }
}

/// Space in which each boundary input is naturally measured:
/// family A `(H^{1/3}, L², H^{-1/3})`, family B `(H^{1/3}, H^{1/3}, L²)`.
pub fn natural_index(family: BcFamily, channel: Channel) -> f64 {
    match (family, channel) {
        (_, Channel::One) => 1.0 / 3.0,
        (BcFamily::A, Channel::Two) => 0.0,
        (BcFamily::A, Channel::Three) => -1.0 / 3.0,
        (BcFamily::B, Channel::Two) => 1.0 / 3.0,
        (BcFamily::B, Channel::Three) => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    AdjointBackward,
}

/// Source term of the linear system.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Forcing {
    #[default]
    None,
    /// Samples at every time level, `(n_t+1) × (n_x+1)`; each step uses the
    /// θ-weighted combination of its two end levels.
    Nodal(DMatrix<f64>),
    /// One already-averaged source per step, `n_t × (n_x+1)`.
    Stepwise(DMatrix<f64>),
}

impl Forcing {
    fn check(&self, tg: &TimeGrid, g: &SpatialGrid) -> Result<(), SolverError> {
        let (what, rows, m) = match self {
            Forcing::None => return Ok(()),
            Forcing::Nodal(m) => ("nodal forcing", tg.n_levels(), m),
            Forcing::Stepwise(m) => ("stepwise forcing", tg.n_t(), m),
        };
        if m.nrows() != rows {
            return Err(SolverError::Shape { what, expected: rows, got: m.nrows() });
        }
        if m.ncols() != g.n_nodes() {
            return Err(SolverError::Shape { what, expected: g.n_nodes(), got: m.ncols() });
        }
        Ok(())
    }

    /// Source for step `k -> k+1`.
    fn at_step(&self, k: usize, theta: f64) -> Option<DVector<f64>> {
        match self {
            Forcing::None => None,
            Forcing::Nodal(m) => {
                let a = m.row(k).transpose();
                let b = m.row(k + 1).transpose();
                Some(a * (1.0 - theta) + b * theta)
            }
            Forcing::Stepwise(m) => Some(m.row(k).transpose()),
        }
    }
}

/// A linear (or, for the nonlinear solver, semilinear) KdV problem.
///
/// For `Forward` the state is the initial datum and `boundary_data` are the
/// family's three inputs. For `AdjointBackward` the state is the terminal
/// datum, the equation is `ψ_t + ψ_x + ψ_xxx = f` solved backward from `T`,
/// and `boundary_data` hold the three constraint values (normally zero).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProblem {
    pub grid: SpatialGrid,
    pub tgrid: TimeGrid,
    pub family: BcFamily,
    pub state: DVector<f64>,
    pub boundary_data: [Option<Vec<f64>>; 3],
    pub forcing: Forcing,
    pub direction: Direction,
    pub theta: f64,
}

impl LinearProblem {
    pub fn forward(grid: SpatialGrid, tgrid: TimeGrid, family: BcFamily, y0: DVector<f64>) -> Self {
        Self {
            grid,
            tgrid,
            family,
            state: y0,
            boundary_data: [None, None, None],
            forcing: Forcing::None,
            direction: Direction::Forward,
            theta: 0.5,
        }
    }

    pub fn adjoint(grid: SpatialGrid, tgrid: TimeGrid, family: BcFamily, terminal: DVector<f64>) -> Self {
        Self { direction: Direction::AdjointBackward, ..Self::forward(grid, tgrid, family, terminal) }
    }

    pub fn with_boundary(mut self, channel: Channel, samples: Vec<f64>) -> Self {
        self.boundary_data[channel.index()] = Some(samples);
        self
    }

    pub fn with_forcing(mut self, forcing: Forcing) -> Self {
        self.forcing = forcing;
        self
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    fn validate(&self) -> Result<(), SolverError> {
        if self.state.len() != self.grid.n_nodes() {
            return Err(SolverError::Shape { what: "state", expected: self.grid.n_nodes(), got: self.state.len() });
        }
        for s in self.boundary_data.iter().flatten() {
            if s.len() != self.tgrid.n_levels() {
                return Err(SolverError::Shape { what: "boundary data", expected: self.tgrid.n_levels(), got: s.len() });
            }
        }
        self.forcing.check(&self.tgrid, &self.grid)
    }

    fn bc_at(&self, level: usize) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, s) in out.iter_mut().zip(&self.boundary_data) {
            if let Some(s) = s {
                *o = s[level];
            }
        }
        out
    }
}

/// Space-time samples of a solution, row `k` at time `k·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub grid: SpatialGrid,
    pub tgrid: TimeGrid,
    pub samples: DMatrix<f64>,
    pub family: BcFamily,
}

impl StateTrajectory {
    pub fn state(&self, k: usize) -> DVector<f64> {
        self.samples.row(k).transpose()
    }

    pub fn final_state(&self) -> DVector<f64> {
        self.state(self.tgrid.n_t())
    }

    /// Trapezoid-weighted squared L² norm at level `k`.
    pub fn energy(&self, k: usize) -> f64 {
        let s = self.state(k);
        self.grid.inner(s.as_slice(), s.as_slice())
    }

    /// `max_t ‖v‖ + (∫ ‖v_x‖² dt)^{1/2}`, the discrete X_T norm.
    pub fn xt_norm(&self) -> f64 {
        xt_norm(&self.grid, &self.tgrid, &self.samples)
    }

    /// `∫₀ᵀ ‖v(t)‖² dt` with trapezoid weights in both variables.
    pub fn l2l2_sq(&self) -> f64 {
        let wt = self.tgrid.weights();
        (0..self.tgrid.n_levels()).map(|k| wt[k] * self.energy(k)).sum()
    }
}

/// Discrete X_T norm of a sample matrix, rows = time levels.
pub fn xt_norm(grid: &SpatialGrid, tgrid: &TimeGrid, v: &DMatrix<f64>) -> f64 {
    let wx = grid.weights();
    let wt = tgrid.weights();
    let n = grid.n_x();
    let h = grid.dx();
    let mut sup: f64 = 0.0;
    let mut h1 = 0.0;
    let mut row = vec![0.0; n + 1];
    let mut d = vec![0.0; n + 1];
    for k in 0..v.nrows() {
        for i in 0..=n {
            row[i] = v[(k, i)];
        }
        sup = sup.max(crate::discretization::weighted_dot(&wx, &row, &row));
        d[0] = stencil::apply(&stencil::dx_left(h), &row);
        d[n] = stencil::apply(&stencil::dx_right(n, h), &row);
        for i in 1..n {
            d[i] = (row[i + 1] - row[i - 1]) / (2.0 * h);
        }
        h1 += wt[k] * crate::discretization::weighted_dot(&wx, &d, &d);
    }
    sup.sqrt() + h1.sqrt()
}

/// Reusable solver for fixed grids, family and θ.
#[derive(Debug, Clone)]
pub struct KdvSolver {
    pub grid: SpatialGrid,
    pub tgrid: TimeGrid,
    pub family: BcFamily,
    forward: ThetaStepper,
    adjoint: ThetaStepper,
}

impl KdvSolver {
    pub fn new(grid: SpatialGrid, tgrid: TimeGrid, family: BcFamily, theta: f64) -> Result<Self, SolverError> {
        let fwd = ThetaStepper::new(&assemble_operator(&grid, family, false), tgrid.dt(), theta)?;
        let adj = ThetaStepper::new(&assemble_operator(&grid, family, true), tgrid.dt(), theta)?;
        Ok(Self { grid, tgrid, family, forward: fwd, adjoint: adj })
    }

    pub fn forward_stepper(&self) -> &ThetaStepper {
        &self.forward
    }

    pub fn adjoint_stepper(&self) -> &ThetaStepper {
        &self.adjoint
    }

    fn check(&self, p: &LinearProblem) -> Result<(), SolverError> {
        p.validate()?;
        if p.grid != self.grid || p.tgrid != self.tgrid || p.family != self.family || p.theta != self.forward.theta() {
            return Err(SolverError::Mismatch);
        }
        Ok(())
    }

    pub fn forward_linear(&self, p: &LinearProblem) -> Result<StateTrajectory, SolverError> {
        self.check(p)?;
        if p.direction != Direction::Forward {
            return Err(SolverError::WrongDirection(p.direction));
        }
        let nt = self.tgrid.n_t();
        let mut out = DMatrix::zeros(nt + 1, self.grid.n_nodes());
        out.set_row(0, &p.state.transpose());
        let mut y = p.state.clone();
        for k in 0..nt {
            let f = p.forcing.at_step(k, p.theta);
            y = self.forward.step(&y, f.as_ref(), p.bc_at(k + 1));
            out.set_row(k + 1, &y.transpose());
        }
        Ok(self.wrap(out))
    }

    pub fn adjoint(&self, p: &LinearProblem) -> Result<StateTrajectory, SolverError> {
        self.check(p)?;
        if p.direction != Direction::AdjointBackward {
            return Err(SolverError::WrongDirection(p.direction));
        }
        let nt = self.tgrid.n_t();
        let mut out = DMatrix::zeros(nt + 1, self.grid.n_nodes());
        out.set_row(nt, &p.state.transpose());
        let mut y = p.state.clone();
        for k in (0..nt).rev() {
            // reversed time: the step from level k+1 down to k sees -f
            let f = p.forcing.at_step(k, 1.0 - p.theta).map(|f| -f);
            y = self.adjoint.step(&y, f.as_ref(), p.bc_at(k));
            out.set_row(k, &y.transpose());
        }
        Ok(self.wrap(out))
    }

    pub fn forward_nonlinear(&self, p: &LinearProblem, picard_inner_tol: f64) -> Result<StateTrajectory, SolverError> {
        self.check(p)?;
        if p.direction != Direction::Forward {
            return Err(SolverError::WrongDirection(p.direction));
        }
        let nt = self.tgrid.n_t();
        let m = self.grid.n_nodes();
        let rows = self.forward.boundary_rows();
        let mut out = DMatrix::zeros(nt + 1, m);
        out.set_row(0, &p.state.transpose());
        let mut y = p.state.clone();
        for k in 0..nt {
            let f = p.forcing.at_step(k, p.theta).unwrap_or_else(|| DVector::zeros(m));
            let bc = p.bc_at(k + 1);
            let src = |mid: &DVector<f64>| {
                let mut s = skew_nonlinearity(mid, self.grid.dx());
                for &r in &rows {
                    s[r] = 0.0;
                }
                &f - s
            };
            let mut guess = self.forward.step(&y, Some(&src(&y)), bc);
            let mut converged = false;
            for _ in 0..MAX_INNER_SWEEPS {
                let mid = (&y + &guess) * 0.5;
                let next = self.forward.step(&y, Some(&src(&mid)), bc);
                let inc = (&next - &guess).amax();
                guess = next;
                if !inc.is_finite() {
                    break;
                }
                if inc < picard_inner_tol {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(SolverError::InnerDiverged { step: k, sweeps: MAX_INNER_SWEEPS, amplitude: y.amax() });
            }
            y = guess;
            out.set_row(k + 1, &y.transpose());
        }
        Ok(self.wrap(out))
    }

    fn wrap(&self, samples: DMatrix<f64>) -> StateTrajectory {
        StateTrajectory { grid: self.grid, tgrid: self.tgrid, samples, family: self.family }
    }
}

/// Skew-symmetric form `(y·Dy + D(y²))/3` of `y·y_x` with central `D`.
/// Zero at the two end nodes.
pub fn skew_nonlinearity(y: &DVector<f64>, h: f64) -> DVector<f64> {
    let n = y.len() - 1;
    let mut out = DVector::zeros(n + 1);
    for i in 1..n {
        let (l, c, r) = (y[i - 1], y[i], y[i + 1]);
        out[i] = (c * (r - l) + (r * r - l * l)) / (6.0 * h);
    }
    out
}

/// Stepwise source `N((v_k + v_{k+1})/2)` for each step of a trajectory.
pub fn stepwise_nonlinearity(v: &StateTrajectory) -> DMatrix<f64> {
    let nt = v.tgrid.n_t();
    let mut out = DMatrix::zeros(nt, v.grid.n_nodes());
    for k in 0..nt {
        let mid = (v.state(k) + v.state(k + 1)) * 0.5;
        out.set_row(k, &skew_nonlinearity(&mid, v.grid.dx()).transpose());
    }
    out
}

pub fn solve_forward_linear(p: &LinearProblem) -> Result<StateTrajectory, SolverError> {
    KdvSolver::new(p.grid, p.tgrid, p.family, p.theta)?.forward_linear(p)
}

pub fn solve_adjoint(p: &LinearProblem) -> Result<StateTrajectory, SolverError> {
    KdvSolver::new(p.grid, p.tgrid, p.family, p.theta)?.adjoint(p)
}

pub fn solve_forward_nonlinear(p: &LinearProblem, picard_inner_tol: f64) -> Result<StateTrajectory, SolverError> {
    KdvSolver::new(p.grid, p.tgrid, p.family, p.theta)?.forward_nonlinear(p, picard_inner_tol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TracePosition {
    Left,
    Right,
    At(f64),
}

/// Spatial derivative of order `order` of one state at a position.
pub fn derivative_at(state: &[f64], grid: &SpatialGrid, order: usize, pos: TracePosition) -> Result<f64, SolverError> {
    let n = grid.n_x();
    let h = grid.dx();
    let at_node = |i: usize| -> f64 {
        if i == 0 {
            match order {
                0 => state[0],
                1 => stencil::apply(&stencil::dx_left(h), state),
                _ => stencil::apply(&stencil::dxx_left(h), state),
            }
        } else if i == n {
            match order {
                0 => state[n],
                1 => stencil::apply(&stencil::dx_right(n, h), state),
                _ => stencil::apply(&stencil::dxx_right(n, h), state),
            }
        } else {
            match order {
                0 => state[i],
                1 => (state[i + 1] - state[i - 1]) / (2.0 * h),
                _ => (state[i + 1] - 2.0 * state[i] + state[i - 1]) / (h * h),
            }
        }
    };
    if order > 2 {
        return Err(SolverError::TraceOrder(order));
    }
    match pos {
        TracePosition::Left => Ok(at_node(0)),
        TracePosition::Right => Ok(at_node(n)),
        TracePosition::At(x) => {
            if !(0.0..=grid.length()).contains(&x) {
                return Err(SolverError::TracePosition { x, length: grid.length() });
            }
            let s = x / h;
            let i = s.floor() as usize;
            let frac = s - i as f64;
            if i >= n || frac.abs() < 1e-9 {
                return Ok(at_node(i.min(n)));
            }
            if (1.0 - frac).abs() < 1e-9 {
                return Ok(at_node(i + 1));
            }
            Ok((1.0 - frac) * at_node(i) + frac * at_node(i + 1))
        }
    }
}

/// Boundary or interior trace `∂x^j y(x, ·)` of a trajectory, tagged with
/// Sobolev index `(1 - j)/3`.
pub fn extract_trace(traj: &StateTrajectory, derivative_order: usize, position: TracePosition) -> Result<ControlSignal, SolverError> {
    let samples = (0..traj.tgrid.n_levels())
        .map(|k| {
            let row: Vec<f64> = traj.samples.row(k).iter().copied().collect();
            derivative_at(&row, &traj.grid, derivative_order, position)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ControlSignal {
        tgrid: traj.tgrid,
        samples,
        sobolev_index: (1.0 - derivative_order as f64) / 3.0,
        channel: None,
    })
}
