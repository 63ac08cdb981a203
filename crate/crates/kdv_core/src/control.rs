//! Control-to-final-state maps, observability Gramians and HUM synthesis.
//!
//! Final states are measured in a filtered space: the span of the slowest
//! eigenmodes of the adjoint discrete operator, orthonormal in the trapezoid
//! inner product. On the full nodal space the discrete Gramian has a
//! numerical kernel (grid-scale modes with vanishing group velocity and
//! dispersive modes the time step cannot resolve), so exact nodal targets are
//! out of reach at any resolution. The nodal space is still available for
//! structure checks.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::discretization::{assemble_operator, BcFamily, Channel, SpatialGrid, TimeGrid};
use crate::solvers::{
    extract_trace, natural_index, ControlSignal, Forcing, KdvSolver, LinearProblem, SolverError, StateTrajectory,
    TracePosition,
};
use crate::sobolev::SpectralBasis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("configuration has no active channel")]
    NoChannels,
    #[error("smoothing exponent {0} not in {{-1/3, 0, 1/3}}")]
    Smoothing(f64),
    #[error("regularization epsilon must be nonnegative, got {0}")]
    Epsilon(f64),
    #[error("filtered space needs at least one mode")]
    NoModes,
    #[error("explicit map would hold {entries} entries, budget is {budget}")]
    Budget { entries: usize, budget: usize },
    #[error("expected {expected} control signals, got {got}")]
    ControlCount { expected: usize, got: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("conjugate gradients stalled after {iterations} iterations (relative residual {residual:.3e}, gramian sigma_min {sigma_min:.3e})")]
    CgStagnation { iterations: usize, residual: f64, sigma_min: f64 },
}

/// Final-state coordinates used by the Gramian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalSpace {
    /// Slowest `modes` eigenmodes (rounded up to close a conjugate pair).
    Modal { modes: usize },
    /// Every interior node.
    Nodal,
}

impl Default for FinalSpace {
    fn default() -> Self {
        FinalSpace::Modal { modes: 8 }
    }
}

/// Where the observation operator comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HumMode {
    /// Exact transpose of the discrete control-to-state map.
    #[default]
    Discrete,
    /// Boundary traces of the discretized adjoint system.
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlConfig {
    pub family: BcFamily,
    /// Sorted, without duplicates.
    pub channels: Vec<Channel>,
    /// `Δt` exponent per channel, indexed by channel.
    pub smoothing: [f64; 3],
    pub regularization_epsilon: f64,
    pub final_space: FinalSpace,
    pub hum: HumMode,
    pub theta: f64,
    /// Largest explicit map (entries) [`ControlSystem::explicit_map`] will build.
    pub max_map_entries: usize,
}

impl ControlConfig {
    pub fn new(family: BcFamily, channels: &[Channel]) -> Result<Self, ControlError> {
        let mut ch = channels.to_vec();
        ch.sort();
        ch.dedup();
        if ch.is_empty() {
            return Err(ControlError::NoChannels);
        }
        Ok(Self {
            family,
            channels: ch,
            smoothing: [0.0; 3],
            regularization_epsilon: 0.0,
            final_space: FinalSpace::default(),
            hum: HumMode::Discrete,
            theta: 0.5,
            max_map_entries: 20_000_000,
        })
    }

    pub fn with_smoothing(mut self, channel: Channel, e: f64) -> Self {
        self.smoothing[channel.index()] = e;
        self
    }

    pub fn with_final_space(mut self, space: FinalSpace) -> Self {
        self.final_space = space;
        self
    }

    pub fn with_hum(mut self, hum: HumMode) -> Self {
        self.hum = hum;
        self
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.regularization_epsilon = eps;
        self
    }

    /// `A:h1+h2` style identifier.
    pub fn id(&self) -> String {
        let labels: Vec<String> = self.channels.iter().map(|c| c.label(self.family)).collect();
        format!("{}:{}", self.family.tag(), labels.join("+"))
    }

    fn validate(&self) -> Result<(), ControlError> {
        if self.channels.is_empty() {
            return Err(ControlError::NoChannels);
        }
        for e in self.smoothing {
            if ![-1.0 / 3.0, 0.0, 1.0 / 3.0].iter().any(|v: &f64| (v - e).abs() < 1e-12) {
                return Err(ControlError::Smoothing(e));
            }
        }
        if !(self.regularization_epsilon >= 0.0) {
            return Err(ControlError::Epsilon(self.regularization_epsilon));
        }
        if self.final_space == (FinalSpace::Modal { modes: 0 }) {
            return Err(ControlError::NoModes);
        }
        Ok(())
    }
}

/// Dense symmetric Gramian over final-state coordinates.
#[derive(Debug, Clone)]
pub struct Gramian {
    pub matrix: DMatrix<f64>,
    pub config: ControlConfig,
    /// Ascending eigenvalues.
    pub eigenvalues: Vec<f64>,
    pub space_weights: Vec<f64>,
    pub time_weights: Vec<f64>,
}

impl Gramian {
    pub fn sigma_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn sigma_max(&self) -> f64 {
        *self.eigenvalues.last().expect("nonempty")
    }

    pub fn norm(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `‖G - Gᵀ‖_max / ‖G‖`.
    pub fn asymmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).amax() / self.norm().max(f64::MIN_POSITIVE)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `1/√σ_min`, or infinity when `σ_min` is not resolved above round-off.
    pub fn observability_constant(&self) -> f64 {
        let s = self.sigma_min();
        if s <= 1e-13 * self.norm() {
            f64::INFINITY
        } else {
            1.0 / s.sqrt()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub controls: Vec<ControlSignal>,
    pub achieved_final: DVector<f64>,
    /// Defect in the Gramian's final-state coordinates, from a fresh replay.
    pub relative_error: f64,
    /// Same defect measured on every node; diagnostic only.
    pub nodal_error: f64,
    pub gramian_sigma_min: f64,
    /// Zero when the Gramian was factored directly.
    pub cg_iterations: usize,
    /// Replayed trajectory.
    pub trajectory: StateTrajectory,
}

/// Result of conjugate gradients.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Conjugate gradients for an SPD operator, relative residual stopping rule.
pub fn conjugate_gradient(
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    tol: f64,
    max_iterations: usize,
) -> CgSolution {
    let mut x = DVector::zeros(b.len());
    let bn = b.norm();
    if bn == 0.0 {
        return CgSolution { x, iterations: 0, residual: 0.0, converged: true };
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    for it in 0..max_iterations {
        let q = apply(&p);
        let pq = p.dot(&q);
        if !(pq > 0.0) {
            let res = (b - apply(&x)).norm() / bn;
            return CgSolution { x, iterations: it, residual: res, converged: res <= tol };
        }
        let alpha = rr / pq;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &q, 1.0);
        let rn = r.dot(&r);
        if rn.sqrt() <= tol * bn {
            // confirm with the true residual before stopping
            let true_r = b - apply(&x);
            if true_r.norm() <= tol * bn {
                return CgSolution { x, iterations: it + 1, residual: true_r.norm() / bn, converged: true };
            }
            r = true_r;
            p = r.clone();
            rr = r.dot(&r);
            continue;
        }
        p = &r + &p * (rn / rr);
        rr = rn;
    }
    let res = (b - apply(&x)).norm() / bn;
    CgSolution { x, iterations: max_iterations, residual: res, converged: res <= tol }
}

/// Coarser grids factor the Gramian (Cholesky); finer ones run conjugate
/// gradients. A Cholesky failure (semidefinite Gramian) also falls back to CG.
pub const DIRECT_SOLVE_MAX_NX: usize = 128;

/// Everything needed to map controls to final states and back for one
/// configuration on fixed grids.
#[derive(Debug, Clone)]
pub struct ControlSystem {
    pub config: ControlConfig,
    pub grid: SpatialGrid,
    pub tgrid: TimeGrid,
    solver: KdvSolver,
    interior: Vec<usize>,
    /// Interior-node basis, columns orthonormal in the trapezoid inner product.
    basis: DMatrix<f64>,
    spectral: SpectralBasis,
    /// Per active channel: observation of each basis vector, `dim × (n_t+1)`.
    observation: Vec<DMatrix<f64>>,
    gramian: Gramian,
}

impl ControlSystem {
    pub fn new(config: ControlConfig, grid: SpatialGrid, tgrid: TimeGrid) -> Result<Self, ControlError> {
        config.validate()?;
        let solver = KdvSolver::new(grid, tgrid, config.family, config.theta)?;
        let op = assemble_operator(&grid, config.family, false);
        let interior = op.interior();
        let basis = match config.final_space {
            FinalSpace::Nodal => DMatrix::identity(interior.len(), interior.len()) / grid.dx().sqrt(),
            FinalSpace::Modal { modes } => modal_basis(&op, modes),
        };
        let spectral = SpectralBasis::new(tgrid);
        let mut sys = Self {
            gramian: Gramian {
                matrix: DMatrix::zeros(0, 0),
                config: config.clone(),
                eigenvalues: vec![],
                space_weights: grid.weights(),
                time_weights: tgrid.weights(),
            },
            config,
            grid,
            tgrid,
            solver,
            interior,
            basis,
            spectral,
            observation: vec![],
        };
        sys.observation = sys.observe_basis()?;
        sys.gramian = sys.assemble();
        Ok(sys)
    }

    pub fn gramian(&self) -> &Gramian {
        &self.gramian
    }

    pub fn solver(&self) -> &KdvSolver {
        &self.solver
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Coordinates `Φᵀ W_x y` of a full nodal state.
    pub fn coordinates(&self, y: &DVector<f64>) -> DVector<f64> {
        let h = self.grid.dx();
        let yi = DVector::from_iterator(self.interior.len(), self.interior.iter().map(|&i| y[i] * h));
        self.basis.transpose() * yi
    }

    /// Full nodal vector `Φ c` with zeros on boundary rows.
    pub fn expand(&self, c: &DVector<f64>) -> DVector<f64> {
        let v = &self.basis * c;
        let mut out = DVector::zeros(self.grid.n_nodes());
        for (k, &i) in self.interior.iter().enumerate() {
            out[i] = v[k];
        }
        out
    }

    fn controls_problem(&self, y0: &DVector<f64>, controls: &[Vec<f64>], forcing: &Forcing) -> Result<LinearProblem, ControlError> {
        if controls.len() != self.config.channels.len() {
            return Err(ControlError::ControlCount { expected: self.config.channels.len(), got: controls.len() });
        }
        let mut p = LinearProblem::forward(self.grid, self.tgrid, self.config.family, y0.clone())
            .with_forcing(forcing.clone())
            .with_theta(self.config.theta);
        for (ch, s) in self.config.channels.iter().zip(controls) {
            p = p.with_boundary(*ch, s.clone());
        }
        Ok(p)
    }

    /// Forward trajectory from `y0` under the given controls and source.
    pub fn trajectory(&self, y0: &DVector<f64>, controls: &[Vec<f64>], forcing: &Forcing) -> Result<StateTrajectory, ControlError> {
        Ok(self.solver.forward_linear(&self.controls_problem(y0, controls, forcing)?)?)
    }

    /// Nonlinear trajectory from `y0` under the given controls.
    pub fn nonlinear_trajectory(&self, y0: &DVector<f64>, controls: &[Vec<f64>], inner_tol: f64) -> Result<StateTrajectory, ControlError> {
        Ok(self.solver.forward_nonlinear(&self.controls_problem(y0, controls, &Forcing::None)?, inner_tol)?)
    }

    /// Matrix-free control-to-final map with zero initial state.
    pub fn apply_map(&self, controls: &[Vec<f64>]) -> Result<DVector<f64>, ControlError> {
        Ok(self.trajectory(&DVector::zeros(self.grid.n_nodes()), controls, &Forcing::None)?.final_state())
    }

    /// Euclidean transpose of the map from stacked samples to the full final state.
    pub fn apply_transpose(&self, w: &DVector<f64>) -> Result<Vec<Vec<f64>>, ControlError> {
        let m = self.grid.n_nodes();
        if w.len() != m {
            return Err(ControlError::Shape { what: "final-state weight", expected: m, got: w.len() });
        }
        let st = self.solver.forward_stepper();
        let rows = st.boundary_rows();
        let nt = self.tgrid.n_t();
        let mut out = vec![vec![0.0; nt + 1]; self.config.channels.len()];
        let mut q = w.clone();
        for k in (1..=nt).rev() {
            let s = st.solve_transpose(&q);
            for (o, ch) in out.iter_mut().zip(&self.config.channels) {
                o[k] = s[rows[ch.index()]];
            }
            q = st.explicit_matrix().tr_mul(&s);
        }
        Ok(out)
    }

    /// Adjoint in the weighted products: `⟨B h, w⟩_x = ⟨h, B* w⟩_t`.
    pub fn apply_adjoint(&self, w: &DVector<f64>) -> Result<Vec<Vec<f64>>, ControlError> {
        let wx = self.grid.weights();
        let scaled = DVector::from_iterator(w.len(), w.iter().zip(&wx).map(|(a, b)| a * b));
        let wt = self.tgrid.weights();
        let mut out = self.apply_transpose(&scaled)?;
        for o in &mut out {
            for (v, w) in o.iter_mut().zip(&wt) {
                *v /= w;
            }
        }
        Ok(out)
    }

    /// Explicit map by unit-impulse forward solves, columns stacked by channel
    /// then time level.
    pub fn explicit_map(&self) -> Result<DMatrix<f64>, ControlError> {
        let n_levels = self.tgrid.n_levels();
        let cols = self.config.channels.len() * n_levels;
        let entries = cols * self.grid.n_nodes();
        if entries > self.config.max_map_entries {
            return Err(ControlError::Budget { entries, budget: self.config.max_map_entries });
        }
        let columns: Vec<DVector<f64>> = (0..cols)
            .into_par_iter()
            .map(|j| {
                let mut controls = vec![vec![0.0; n_levels]; self.config.channels.len()];
                controls[j / n_levels][j % n_levels] = 1.0;
                self.apply_map(&controls)
            })
            .collect::<Result<_, _>>()?;
        Ok(DMatrix::from_columns(&columns))
    }

    /// Observation of a terminal state: discrete mode uses the weighted
    /// transpose restricted to interior nodes; continuous mode takes traces of
    /// the adjoint system.
    pub fn observe(&self, psi: &DVector<f64>) -> Result<Vec<Vec<f64>>, ControlError> {
        match self.config.hum {
            HumMode::Discrete => {
                let mut w = DVector::zeros(self.grid.n_nodes());
                for &i in &self.interior {
                    w[i] = psi[i];
                }
                self.apply_adjoint(&w)
            }
            HumMode::Continuous => self.continuous_observation(psi),
        }
    }

    /// Boundary traces of the adjoint solution pairing with each active channel.
    pub fn continuous_observation(&self, psi_t: &DVector<f64>) -> Result<Vec<Vec<f64>>, ControlError> {
        let p = LinearProblem::adjoint(self.grid, self.tgrid, self.config.family, psi_t.clone()).with_theta(self.config.theta);
        let tr = self.solver.adjoint(&p)?;
        self.config
            .channels
            .iter()
            .map(|ch| {
                let (order, pos, sign) = adjoint_pairing(self.config.family, *ch);
                let s = extract_trace(&tr, order, pos)?;
                Ok(s.samples.into_iter().map(|v| sign * v).collect())
            })
            .collect()
    }

    fn observe_basis(&self) -> Result<Vec<DMatrix<f64>>, ControlError> {
        let dim = self.dim();
        let per_vec: Vec<Vec<Vec<f64>>> = (0..dim)
            .into_par_iter()
            .map(|m| self.observe(&self.expand(&DVector::from_fn(dim, |i, _| if i == m { 1.0 } else { 0.0 }))))
            .collect::<Result<_, _>>()?;
        let n_levels = self.tgrid.n_levels();
        Ok((0..self.config.channels.len())
            .map(|c| DMatrix::from_fn(dim, n_levels, |m, k| per_vec[m][c][k]))
            .collect())
    }

    /// Rows whose Gram product is the Gramian: trapezoid-scaled samples for
    /// unsmoothed channels, weighted cosine coefficients otherwise.
    fn features(&self) -> DMatrix<f64> {
        let dim = self.dim();
        let n_levels = self.tgrid.n_levels();
        let wt = self.tgrid.weights();
        let mut x = DMatrix::zeros(dim, n_levels * self.config.channels.len());
        for (c, ch) in self.config.channels.iter().enumerate() {
            let e = self.config.smoothing[ch.index()];
            let obs = &self.observation[c];
            for m in 0..dim {
                let row: Vec<f64> = obs.row(m).iter().copied().collect();
                let feat: Vec<f64> = if e == 0.0 {
                    row.iter().zip(&wt).map(|(o, w)| o * w.sqrt()).collect()
                } else {
                    let d = self.spectral.weights_pow(0.5 * e);
                    self.spectral.coefficients(&row).iter().zip(d).map(|(a, d)| a * d).collect()
                };
                for (k, f) in feat.into_iter().enumerate() {
                    x[(m, c * n_levels + k)] = f;
                }
            }
        }
        x
    }

    fn assemble(&self) -> Gramian {
        let x = self.features();
        let dim = x.nrows();
        let mut g = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..=i {
                let v = x.row(i).dot(&x.row(j));
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        let mut eig: Vec<f64> = SymmetricEigen::new(g.clone()).eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        Gramian {
            matrix: g,
            config: self.config.clone(),
            eigenvalues: eig,
            space_weights: self.grid.weights(),
            time_weights: self.tgrid.weights(),
        }
    }

    /// Controls `S_c O_cᵀ z` for a dual vector `z` in final-state coordinates.
    pub fn controls_from_dual(&self, z: &DVector<f64>) -> Vec<Vec<f64>> {
        self.config
            .channels
            .iter()
            .zip(&self.observation)
            .map(|(ch, obs)| {
                let raw: Vec<f64> = obs.tr_mul(z).iter().copied().collect();
                let e = self.config.smoothing[ch.index()];
                if e == 0.0 {
                    raw
                } else {
                    self.spectral.apply_power(&raw, e).expect("length matches the time grid")
                }
            })
            .collect()
    }

    /// Quadratic form `⟨G ψ, ψ⟩` of a nodal terminal state, evaluated through
    /// the configured observation.
    pub fn quadratic_form(&self, psi: &DVector<f64>) -> Result<f64, ControlError> {
        let obs = self.observe(psi)?;
        Ok(self.observation_energy(&obs))
    }

    /// `Σ_c ⟨o_c, Δt^{e_c} o_c⟩` in the trapezoid product.
    pub fn observation_energy(&self, obs: &[Vec<f64>]) -> f64 {
        let wt = self.tgrid.weights();
        self.config
            .channels
            .iter()
            .zip(obs)
            .map(|(ch, o)| {
                let e = self.config.smoothing[ch.index()];
                if e == 0.0 {
                    o.iter().zip(&wt).map(|(v, w)| w * v * v).sum::<f64>()
                } else {
                    let d = self.spectral.weights_pow(e);
                    self.spectral.coefficients(o).iter().zip(d).map(|(c, d)| d * c * c).sum()
                }
            })
            .sum()
    }

    pub fn synthesize(&self, y0: &DVector<f64>, yt: &DVector<f64>, cg_tol: f64) -> Result<SynthesisResult, ControlError> {
        self.synthesize_with(y0, yt, &Forcing::None, cg_tol)
    }

    /// Minimum-norm controls steering `y0` to `yt` in final-state coordinates,
    /// with a source term present in both the free evolution and the replay.
    pub fn synthesize_with(&self, y0: &DVector<f64>, yt: &DVector<f64>, forcing: &Forcing, cg_tol: f64) -> Result<SynthesisResult, ControlError> {
        let m = self.grid.n_nodes();
        for (what, v) in [("initial state", y0), ("target state", yt)] {
            if v.len() != m {
                return Err(ControlError::Shape { what, expected: m, got: v.len() });
            }
        }
        let zero_controls = vec![vec![0.0; self.tgrid.n_levels()]; self.config.channels.len()];
        let free = self.trajectory(y0, &zero_controls, forcing)?.final_state();
        let d = self.coordinates(&(yt - &free));
        let g = &self.gramian.matrix;
        let eps = self.config.regularization_epsilon;
        let dim = self.dim();
        let direct = if self.grid.n_x() <= DIRECT_SOLVE_MAX_NX {
            (g + DMatrix::identity(dim, dim) * eps).cholesky().map(|c| c.solve(&d))
        } else {
            None
        };
        let (z, iterations) = match direct {
            Some(z) => (z, 0),
            None => {
                let cg = conjugate_gradient(|v| g * v + v * eps, &d, cg_tol, 20 * dim + 200);
                if !cg.converged {
                    return Err(ControlError::CgStagnation {
                        iterations: cg.iterations,
                        residual: cg.residual,
                        sigma_min: self.gramian.sigma_min(),
                    });
                }
                (cg.x, cg.iterations)
            }
        };
        let samples = self.controls_from_dual(&z);
        let traj = self.trajectory(y0, &samples, forcing)?;
        let achieved = traj.final_state();
        let relative_error = self.relative_error(&achieved, y0, yt);
        let nodal_error = {
            let num = self.grid.norm((&achieved - yt).as_slice());
            let den = self.grid.norm(yt.as_slice()).max(self.grid.norm(y0.as_slice())).max(self.error_floor());
            num / den
        };
        let controls = self
            .config
            .channels
            .iter()
            .zip(samples)
            .map(|(ch, s)| {
                let idx = natural_index(self.config.family, *ch);
                ControlSignal { tgrid: self.tgrid, samples: s, sobolev_index: idx, channel: Some(*ch) }
            })
            .collect();
        Ok(SynthesisResult {
            controls,
            achieved_final: achieved,
            relative_error,
            nodal_error,
            gramian_sigma_min: self.gramian.sigma_min(),
            cg_iterations: iterations,
            trajectory: traj,
        })
    }

    fn error_floor(&self) -> f64 {
        1e-14 * self.gramian.norm().max(1.0)
    }

    /// `‖P(achieved - yt)‖ / max(‖P yt‖, ‖P y0‖, floor)` in final-state coordinates.
    pub fn relative_error(&self, achieved: &DVector<f64>, y0: &DVector<f64>, yt: &DVector<f64>) -> f64 {
        let num = self.coordinates(&(achieved - yt)).norm();
        let den = self.coordinates(yt).norm().max(self.coordinates(y0).norm()).max(self.error_floor());
        num / den
    }
}

/// Adjoint trace paired with each input by integration by parts:
/// A: `h1 ~ ψ_xx(0)`, `h2 ~ ψ_x(L)`, `h3 ~ -ψ(L)`;
/// B: `g1 ~ ν_xx(0)`, `g2 ~ -ν_xx(L)`, `g3 ~ ν_x(L)`.
pub fn adjoint_pairing(family: BcFamily, ch: Channel) -> (usize, TracePosition, f64) {
    match (family, ch) {
        (_, Channel::One) => (2, TracePosition::Left, 1.0),
        (BcFamily::A, Channel::Two) => (1, TracePosition::Right, 1.0),
        (BcFamily::A, Channel::Three) => (0, TracePosition::Right, -1.0),
        (BcFamily::B, Channel::Two) => (2, TracePosition::Right, -1.0),
        (BcFamily::B, Channel::Three) => (1, TracePosition::Right, 1.0),
    }
}

/// Real orthonormal basis (trapezoid weights on interior nodes) of the span of
/// the eigenvectors of `A_redᵀ` with the `modes` smallest `|λ|`.
fn modal_basis(op: &crate::discretization::DiscreteOperator, modes: usize) -> DMatrix<f64> {
    let (red, _) = op.reduced();
    let at = red.transpose();
    let n = at.nrows();
    let h = op.grid.dx();
    let mut eig: Vec<Complex<f64>> = at.complex_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| a.norm().total_cmp(&b.norm()).then(b.im.total_cmp(&a.im)));
    let mut raw: Vec<DVector<f64>> = Vec::new();
    let mut count = 0;
    for lam in eig {
        if count >= modes.min(n) {
            break;
        }
        if lam.im < -1e-10 * lam.norm().max(1.0) {
            continue;
        }
        let v = eigenvector(&at, lam);
        raw.push(v.map(|z| z.re));
        count += 1;
        if lam.im > 1e-10 * lam.norm().max(1.0) {
            raw.push(v.map(|z| z.im));
            count += 1;
        }
    }
    // modified Gram-Schmidt, twice, in the weight-h inner product
    let mut out: Vec<DVector<f64>> = Vec::new();
    for mut v in raw {
        let start = v.norm() * h.sqrt();
        for _ in 0..2 {
            for q in &out {
                let c = h * q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let nv = v.norm() * h.sqrt();
        if nv > 1e-8 * start {
            out.push(v / nv);
        }
    }
    DMatrix::from_columns(&out)
}

/// Inverse iteration for the eigenvector of a real matrix at a complex eigenvalue.
fn eigenvector(a: &DMatrix<f64>, lam: Complex<f64>) -> DVector<Complex<f64>> {
    let n = a.nrows();
    let shift = lam + Complex::new(1e-10 * lam.norm().max(1.0), 0.0);
    let m = DMatrix::from_fn(n, n, |i, j| {
        let v = Complex::new(a[(i, j)], 0.0);
        if i == j {
            v - shift
        } else {
            v
        }
    });
    let lu = m.lu();
    let mut v = DVector::from_fn(n, |i, _| Complex::new(1.0 + (i as f64 * 0.37).sin(), 0.0));
    for _ in 0..3 {
        if let Some(x) = lu.solve(&v) {
            let nx = x.norm();
            v = x.map(|z| z / nx);
        }
    }
    // fix the phase so the largest entry is real positive
    let (imax, _) = v.iter().enumerate().fold((0, 0.0), |acc, (i, z)| if z.norm() > acc.1 { (i, z.norm()) } else { acc });
    let phase = v[imax].conj() / v[imax].norm();
    v.map(|z| z * phase)
}

/// Observability constant for a configuration on the given grids.
pub fn observability_constant(config: &ControlConfig, grid: SpatialGrid, tgrid: TimeGrid) -> Result<f64, ControlError> {
    Ok(ControlSystem::new(config.clone(), grid, tgrid)?.gramian().observability_constant())
}

pub fn assemble_gramian(config: &ControlConfig, grid: SpatialGrid, tgrid: TimeGrid) -> Result<Gramian, ControlError> {
    Ok(ControlSystem::new(config.clone(), grid, tgrid)?.gramian().clone())
}

pub fn synthesize_control(
    config: &ControlConfig,
    grid: SpatialGrid,
    tgrid: TimeGrid,
    y0: &DVector<f64>,
    yt: &DVector<f64>,
    cg_tol: f64,
) -> Result<SynthesisResult, ControlError> {
    ControlSystem::new(config.clone(), grid, tgrid)?.synthesize(y0, yt, cg_tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(channels: &[Channel]) -> ControlSystem {
        let cfg = ControlConfig::new(BcFamily::A, channels).unwrap();
        ControlSystem::new(cfg, SpatialGrid::new(1.0, 24).unwrap(), TimeGrid::new(0.5, 24).unwrap()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(matches!(ControlConfig::new(BcFamily::A, &[]), Err(ControlError::NoChannels)));
        let c = ControlConfig::new(BcFamily::B, &[Channel::Three, Channel::One, Channel::One]).unwrap();
        assert_eq!(c.channels, vec![Channel::One, Channel::Three]);
        assert_eq!(c.id(), "B:g1+g3");
        let bad = c.clone().with_smoothing(Channel::One, 0.5);
        assert!(ControlSystem::new(bad, SpatialGrid::new(1.0, 16).unwrap(), TimeGrid::new(1.0, 16).unwrap()).is_err());
    }

    #[test]
    fn modal_basis_is_orthonormal() {
        let sys = small(&[Channel::Two]);
        let b = sys.basis();
        let gram = b.transpose() * b * sys.grid.dx();
        assert!((gram - DMatrix::identity(b.ncols(), b.ncols())).amax() < 1e-12);
        assert!(b.ncols() >= 8);
    }

    #[test]
    fn zero_instance() {
        let sys = small(&[Channel::Two]);
        let z = DVector::zeros(25);
        let r = sys.synthesize(&z, &z, 1e-10).unwrap();
        assert_eq!(r.relative_error, 0.0);
        assert!(r.controls.iter().all(|c| c.samples.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn cg_solves_spd_system() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let s = conjugate_gradient(|v| &a * v, &b, 1e-14, 50);
        assert!(s.converged);
        assert!((&a * &s.x - &b).norm() < 1e-13);
    }

    #[test]
    fn budget_guard() {
        let mut cfg = ControlConfig::new(BcFamily::A, &[Channel::Two]).unwrap();
        cfg.max_map_entries = 10;
        let sys = ControlSystem::new(cfg, SpatialGrid::new(1.0, 16).unwrap(), TimeGrid::new(1.0, 16).unwrap()).unwrap();
        assert!(matches!(sys.explicit_map(), Err(ControlError::Budget { .. })));
    }
}
