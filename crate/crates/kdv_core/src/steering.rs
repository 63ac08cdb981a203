//! Fixed-point steering of the nonlinear equation.
//!
//! Each iterate `v` defines `ν(v)`, the final state of the zero-data solve
//! forced by `v·v_x`. The linear synthesizer aims the unforced system at
//! `y_T + ν(v)`, and those controls replayed with source `-v·v_x` give the
//! next iterate.
//! A fixed point solves the discrete nonlinear scheme, so the final controls
//! are replayed through the nonlinear solver to measure the actual error.

use nalgebra::DVector;
use thiserror::Error;

use crate::control::{ControlError, ControlSystem, SynthesisResult};
use crate::solvers::{stepwise_nonlinearity, xt_norm, ControlSignal, Forcing, StateTrajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SteeringError {
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("data norm {norm:.3e} exceeds the local cap {cap:.3e}")]
    AboveCap { norm: f64, cap: f64 },
    #[error("amplitude outside contraction regime: ratio {ratio:.3} at iterate {iterate} after {previous:.3}")]
    NoContraction { iterate: usize, ratio: f64, previous: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardOptions {
    /// Upper bound on `‖y0‖ + ‖yT‖`; `None` uses `0.05·‖sin(πx/L)‖`.
    pub delta_cap: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub cg_tol: f64,
    /// Fixed-point tolerance of the nonlinear replay.
    pub inner_tol: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { delta_cap: None, max_iter: 20, tol: 1e-8, cg_tol: 1e-12, inner_tol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardState {
    pub iterate_index: usize,
    pub trajectory: StateTrajectory,
    pub controls: Vec<ControlSignal>,
    /// X_T distance to the previous iterate; for iterate 0, to zero.
    pub increment_norm: f64,
    /// `increment_norm(k) / increment_norm(k-1)`, NaN below `k = 2`.
    pub contraction_ratio: f64,
    /// Modal relative error of the iterate's own final state.
    pub linear_defect: f64,
}

#[derive(Debug, Clone)]
pub struct SteeringOutcome {
    pub history: Vec<PicardState>,
    pub converged: bool,
    /// Synthesis that produced the last iterate.
    pub synthesis: SynthesisResult,
    /// Nonlinear solve under the last iterate's controls.
    pub replay: StateTrajectory,
    pub relative_error: f64,
}

impl SteeringOutcome {
    pub fn last(&self) -> &PicardState {
        self.history.last().expect("history holds at least iterate 0")
    }

    /// Last available contraction ratio, NaN if fewer than three iterates.
    pub fn contraction_ratio(&self) -> f64 {
        self.last().contraction_ratio
    }
}

/// `ν(v)`: final state of the homogeneous forward solve with zero initial
/// state and source `v·v_x` (skew form, evaluated at step midpoints).
pub fn nu_functional(system: &ControlSystem, v: &StateTrajectory) -> Result<DVector<f64>, ControlError> {
    let zero = DVector::zeros(system.grid.n_nodes());
    let controls = vec![vec![0.0; system.tgrid.n_levels()]; system.config.channels.len()];
    let forcing = Forcing::Stepwise(stepwise_nonlinearity(v));
    Ok(system.trajectory(&zero, &controls, &forcing)?.final_state())
}

/// One application of the fixed-point map: controls steering the unforced
/// system from `y0` to `yT + ν(v)`, replayed with source `-v·v_x`.
pub fn picard_map(
    system: &ControlSystem,
    y0: &DVector<f64>,
    yt: &DVector<f64>,
    v: &StateTrajectory,
    cg_tol: f64,
) -> Result<SynthesisResult, ControlError> {
    let nu = nu_functional(system, v)?;
    let mut syn = system.synthesize(y0, &(yt + nu), cg_tol)?;
    let source = Forcing::Stepwise(-stepwise_nonlinearity(v));
    let controls: Vec<Vec<f64>> = syn.controls.iter().map(|c| c.samples.clone()).collect();
    syn.trajectory = system.trajectory(y0, &controls, &source)?;
    syn.achieved_final = syn.trajectory.final_state();
    syn.relative_error = system.relative_error(&syn.achieved_final, y0, yt);
    syn.nodal_error = system.grid.norm((&syn.achieved_final - yt).as_slice())
        / system.grid.norm(yt.as_slice()).max(system.grid.norm(y0.as_slice())).max(f64::MIN_POSITIVE);
    Ok(syn)
}

/// Default cap `0.05·‖sin(πx/L)‖` on the current grid.
pub fn default_delta_cap(system: &ControlSystem) -> f64 {
    let g = system.grid;
    let unit = g.sample(|x| (std::f64::consts::PI * x / g.length()).sin());
    0.05 * g.norm(unit.as_slice())
}

pub fn picard_steer(
    system: &ControlSystem,
    y0: &DVector<f64>,
    yt: &DVector<f64>,
    opts: &PicardOptions,
) -> Result<SteeringOutcome, SteeringError> {
    let g = system.grid;
    let cap = opts.delta_cap.unwrap_or_else(|| default_delta_cap(system));
    let norm = g.norm(y0.as_slice()) + g.norm(yt.as_slice());
    if norm > cap {
        return Err(SteeringError::AboveCap { norm, cap });
    }
    let xt = |t: &StateTrajectory| xt_norm(&g, &system.tgrid, &t.samples);

    let mut synthesis = system.synthesize(y0, yt, opts.cg_tol)?;
    let state = |k: usize, syn: &SynthesisResult, inc: f64, ratio: f64| PicardState {
        iterate_index: k,
        trajectory: syn.trajectory.clone(),
        controls: syn.controls.clone(),
        increment_norm: inc,
        contraction_ratio: ratio,
        linear_defect: syn.relative_error,
    };
    let mut history = vec![state(0, &synthesis, xt(&synthesis.trajectory), f64::NAN)];
    let mut converged = history[0].increment_norm < opts.tol;
    let mut expanding = false;
    let mut k = 0;
    while !converged && k < opts.max_iter {
        k += 1;
        let prev = history.last().expect("nonempty");
        let next = picard_map(system, y0, yt, &prev.trajectory, opts.cg_tol)?;
        let diff = &next.trajectory.samples - &prev.trajectory.samples;
        let inc = xt_norm(&g, &system.tgrid, &diff);
        let ratio = if k >= 2 { inc / prev.increment_norm } else { f64::NAN };
        if ratio >= 1.0 {
            if expanding {
                return Err(SteeringError::NoContraction { iterate: k, ratio, previous: prev.contraction_ratio });
            }
            expanding = true;
        } else {
            expanding = false;
        }
        converged = inc < opts.tol;
        history.push(state(k, &next, inc, ratio));
        synthesis = next;
    }

    let controls: Vec<Vec<f64>> = synthesis.controls.iter().map(|c| c.samples.clone()).collect();
    let replay = system.nonlinear_trajectory(y0, &controls, opts.inner_tol)?;
    let relative_error = system.relative_error(&replay.final_state(), y0, yt);
    Ok(SteeringOutcome { history, converged, synthesis, replay, relative_error })
}
