//! Uniform grids, the discrete operator `-∂x - ∂x³` with boundary rows, and the θ-step.
//!
//! Interior rows use second-order central stencils. The two rows next to the
//! boundary fall back to five-point one-sided stencils for the third
//! derivative. Boundary conditions replace three rows of the matrix, so the map
//! from boundary data to the new state stays exactly linear.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Smallest admissible number of cells; the one-sided third-derivative
/// stencils need five nodes on each side without overlapping boundary rows.
pub const MIN_CELLS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("domain length must be positive, got {0}")]
    NonPositiveLength(f64),
    #[error("n_x = {0} is below the minimum of {MIN_CELLS} cells")]
    TooCoarse(usize),
    #[error("time horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("n_t = {0} is below the minimum of {MIN_CELLS} steps")]
    TooFewSteps(usize),
    #[error("theta must lie in [0, 1], got {0}")]
    InvalidTheta(f64),
    #[error("implicit matrix is singular (L = {length}, n_x = {n_x}, dt = {dt})")]
    Singular { length: f64, n_x: usize, dt: f64 },
    #[error("state has {got} entries, grid has {expected} nodes")]
    Shape { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    length: f64,
    n_x: usize,
    dx: f64,
}

impl SpatialGrid {
    pub fn new(length: f64, n_x: usize) -> Result<Self, GridError> {
        if !(length > 0.0) || !length.is_finite() {
            return Err(GridError::NonPositiveLength(length));
        }
        if n_x < MIN_CELLS {
            return Err(GridError::TooCoarse(n_x));
        }
        Ok(Self { length, n_x, dx: length / n_x as f64 })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn n_nodes(&self) -> usize {
        self.n_x + 1
    }

    /// Node positions; the last node is pinned to `L` exactly.
    pub fn nodes(&self) -> Vec<f64> {
        let mut x: Vec<f64> = (0..=self.n_x).map(|i| i as f64 * self.dx).collect();
        x[self.n_x] = self.length;
        x
    }

    /// Trapezoid quadrature weights.
    pub fn weights(&self) -> Vec<f64> {
        trapezoid(self.n_x, self.dx)
    }

    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        weighted_dot(&self.weights(), a, b)
    }

    pub fn norm(&self, a: &[f64]) -> f64 {
        self.inner(a, a).sqrt()
    }

    /// Samples `f` at the nodes.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.n_nodes(), self.nodes().into_iter().map(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_t: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_t: usize) -> Result<Self, GridError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(GridError::NonPositiveHorizon(horizon));
        }
        if n_t < MIN_CELLS {
            return Err(GridError::TooFewSteps(n_t));
        }
        Ok(Self { horizon, n_t, dt: horizon / n_t as f64 })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_levels(&self) -> usize {
        self.n_t + 1
    }

    pub fn times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = (0..=self.n_t).map(|k| k as f64 * self.dt).collect();
        t[self.n_t] = self.horizon;
        t
    }

    pub fn weights(&self) -> Vec<f64> {
        trapezoid(self.n_t, self.dt)
    }
}

fn trapezoid(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n + 1];
    w[0] = 0.5 * h;
    w[n] = 0.5 * h;
    w
}

pub(crate) fn weighted_dot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
}

/// Boundary-condition family. Channel order is fixed:
/// A = (y(0), y_x(L), y_xx(L)), B = (u(0), u(L), u_x(L)).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BcFamily {
    A,
    B,
}

impl BcFamily {
    pub fn tag(self) -> &'static str {
        match self {
            BcFamily::A => "A",
            BcFamily::B => "B",
        }
    }
}

/// One of the three boundary inputs of a family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    One,
    Two,
    Three,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::One, Channel::Two, Channel::Three];

    pub fn index(self) -> usize {
        match self {
            Channel::One => 0,
            Channel::Two => 1,
            Channel::Three => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// `h1..h3` for family A, `g1..g3` for family B.
    pub fn label(self, family: BcFamily) -> String {
        let p = match family {
            BcFamily::A => 'h',
            BcFamily::B => 'g',
        };
        format!("{p}{}", self.index() + 1)
    }

    /// Parses `h2`, `g3`, ... and returns the family implied by the prefix.
    pub fn parse(label: &str) -> Option<(BcFamily, Channel)> {
        let mut chars = label.trim().chars();
        let family = match chars.next()? {
            'h' | 'H' => BcFamily::A,
            'g' | 'G' => BcFamily::B,
            _ => return None,
        };
        let idx: usize = chars.as_str().parse().ok()?;
        Some((family, Channel::from_index(idx.checked_sub(1)?)?))
    }
}

/// Row stencils used by boundary rows and trace extraction.
pub(crate) mod stencil {
    /// Second-order one-sided first derivative at the left end (nodes 0,1,2).
    pub fn dx_left(h: f64) -> [(usize, f64); 3] {
        [(0, -1.5 / h), (1, 2.0 / h), (2, -0.5 / h)]
    }

    /// Second-order one-sided first derivative at the right end.
    pub fn dx_right(n: usize, h: f64) -> [(usize, f64); 3] {
        [(n, 1.5 / h), (n - 1, -2.0 / h), (n - 2, 0.5 / h)]
    }

    /// Second-order one-sided second derivative at the left end (nodes 0..3).
    pub fn dxx_left(h: f64) -> [(usize, f64); 4] {
        let h2 = h * h;
        [(0, 2.0 / h2), (1, -5.0 / h2), (2, 4.0 / h2), (3, -1.0 / h2)]
    }

    pub fn dxx_right(n: usize, h: f64) -> [(usize, f64); 4] {
        let h2 = h * h;
        [(n, 2.0 / h2), (n - 1, -5.0 / h2), (n - 2, 4.0 / h2), (n - 3, -1.0 / h2)]
    }

    /// Five-point third derivative at node `i` from nodes `first..first+5`.
    pub fn d3_one_sided(i: usize, first: usize, h: f64) -> [(usize, f64); 5] {
        use nalgebra::{Matrix5, Vector5};
        let offs: Vec<f64> = (0..5).map(|j| (first + j) as f64 - i as f64).collect();
        let v = Matrix5::from_fn(|p, j| offs[j].powi(p as i32));
        let rhs = Vector5::new(0.0, 0.0, 0.0, 6.0, 0.0);
        let w = v.lu().solve(&rhs).expect("distinct offsets give an invertible Vandermonde system");
        let h3 = h * h * h;
        let mut out = [(0usize, 0.0); 5];
        for j in 0..5 {
            out[j] = (first + j, w[j] / h3);
        }
        out
    }

    pub fn apply<const K: usize>(st: &[(usize, f64); K], y: &[f64]) -> f64 {
        st.iter().map(|&(j, c)| c * y[j]).sum()
    }
}

/// Operator matrix with three boundary rows replaced by constraint stencils.
///
/// Forward mode discretizes `-∂x - ∂x³`. Adjoint mode discretizes `∂x + ∂x³`,
/// the generator of the adjoint system marched in reversed time, with
/// homogeneous rows `ψ(0) = ψ_x(0) = 0` and `ψ(L) + ψ_xx(L) = 0` (family A) or
/// `ν(0) = ν_x(0) = ν(L) = 0` (family B).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteOperator {
    pub matrix: DMatrix<f64>,
    /// Row indices in channel order (forward) or constraint order (adjoint).
    pub boundary_rows: [usize; 3],
    pub family: BcFamily,
    pub adjoint: bool,
    pub grid: SpatialGrid,
}

pub fn assemble_operator(grid: &SpatialGrid, family: BcFamily, adjoint_mode: bool) -> DiscreteOperator {
    use stencil::*;
    let n = grid.n_x();
    let h = grid.dx();
    let sign = if adjoint_mode { 1.0 } else { -1.0 };
    let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
    let left = d3_one_sided(1, 0, h);
    let right = d3_one_sided(n - 1, n - 4, h);
    let h3 = h * h * h;
    for i in 1..n {
        a[(i, i + 1)] += sign * 0.5 / h;
        a[(i, i - 1)] -= sign * 0.5 / h;
        if (2..=n - 2).contains(&i) {
            for (j, c) in [(i - 2, -1.0), (i - 1, 2.0), (i + 1, -2.0), (i + 2, 1.0)] {
                a[(i, j)] += sign * 0.5 * c / h3;
            }
        } else {
            let st = if i == 1 { left } else { right };
            for (j, c) in st {
                a[(i, j)] += sign * c;
            }
        }
    }
    let mut set_row = |r: usize, entries: &[(usize, f64)]| {
        a.row_mut(r).fill(0.0);
        for &(j, c) in entries {
            a[(r, j)] += c;
        }
    };
    let boundary_rows = match (family, adjoint_mode) {
        (BcFamily::A, false) => {
            set_row(0, &[(0, 1.0)]);
            set_row(n, &dx_right(n, h));
            set_row(n - 1, &dxx_right(n, h));
            [0, n, n - 1]
        }
        (BcFamily::B, false) => {
            set_row(0, &[(0, 1.0)]);
            set_row(n, &[(n, 1.0)]);
            set_row(n - 1, &dx_right(n, h));
            [0, n, n - 1]
        }
        (BcFamily::A, true) => {
            set_row(0, &[(0, 1.0)]);
            set_row(1, &dx_left(h));
            let mut last: Vec<(usize, f64)> = dxx_right(n, h).to_vec();
            last.push((n, 1.0));
            set_row(n, &last);
            [0, 1, n]
        }
        (BcFamily::B, true) => {
            set_row(0, &[(0, 1.0)]);
            set_row(1, &dx_left(h));
            set_row(n, &[(n, 1.0)]);
            [0, 1, n]
        }
    };
    DiscreteOperator { matrix: a, boundary_rows, family, adjoint: adjoint_mode, grid: *grid }
}

impl DiscreteOperator {
    pub fn is_boundary_row(&self, i: usize) -> bool {
        self.boundary_rows.contains(&i)
    }

    /// Largest homogeneous constraint residual of `y`, relative to the row
    /// scale and `max|y|`. Zero for states in the discrete domain.
    pub fn constraint_residual(&self, y: &[f64]) -> f64 {
        let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        self.boundary_rows
            .iter()
            .map(|&r| {
                let row = self.matrix.row(r);
                let dot: f64 = row.iter().zip(y).map(|(a, b)| a * b).sum();
                dot.abs() / (row.abs().sum() * scale)
            })
            .fold(0.0, f64::max)
    }

    /// Overwrites the boundary nodes of `y` so the homogeneous constraint rows
    /// hold exactly, keeping every other node.
    pub fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        let b = self.boundary_rows;
        let mut out = y.clone();
        for &r in &b {
            out[r] = 0.0;
        }
        let m = DMatrix::from_fn(3, 3, |i, j| self.matrix[(b[i], b[j])]);
        let rhs = DVector::from_fn(3, |i, _| -self.matrix.row(b[i]).dot(&out.transpose()));
        let v = m.lu().solve(&rhs).expect("boundary block is nonsingular");
        for (i, &r) in b.iter().enumerate() {
            out[r] = v[i];
        }
        out
    }

    /// Node indices that are not boundary rows, in increasing order.
    pub fn interior(&self) -> Vec<usize> {
        (0..self.matrix.nrows()).filter(|&i| !self.is_boundary_row(i)).collect()
    }

    /// Operator on interior unknowns after eliminating the boundary nodes
    /// through the homogeneous constraints. Also returns the elimination map
    /// `S` with `y_B = S y_I`.
    pub fn reduced(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let int = self.interior();
        let mut bnd = self.boundary_rows.to_vec();
        bnd.sort_unstable();
        let c_b = DMatrix::from_fn(3, 3, |r, c| self.matrix[(bnd[r], bnd[c])]);
        let c_i = DMatrix::from_fn(3, int.len(), |r, c| self.matrix[(bnd[r], int[c])]);
        let s = -c_b.lu().solve(&c_i).expect("boundary constraint block is invertible");
        let a_ii = DMatrix::from_fn(int.len(), int.len(), |r, c| self.matrix[(int[r], int[c])]);
        let a_ib = DMatrix::from_fn(int.len(), 3, |r, c| self.matrix[(int[r], bnd[c])]);
        (a_ii + a_ib * &s, s)
    }

    /// Largest real part among eigenvalues of the reduced operator.
    pub fn spectral_abscissa(&self) -> f64 {
        let (red, _) = self.reduced();
        red.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Factored θ-scheme for a fixed operator and step size.
#[derive(Debug, Clone)]
pub struct ThetaStepper {
    lhs: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    lhs_t: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    rhs: DMatrix<f64>,
    boundary_rows: [usize; 3],
    dt: f64,
    theta: f64,
}

impl ThetaStepper {
    pub fn new(op: &DiscreteOperator, dt: f64, theta: f64) -> Result<Self, GridError> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(GridError::InvalidTheta(theta));
        }
        let m = op.matrix.nrows();
        let id = DMatrix::<f64>::identity(m, m);
        let mut lhs = &id - &op.matrix * (theta * dt);
        let mut rhs = &id + &op.matrix * ((1.0 - theta) * dt);
        for &r in &op.boundary_rows {
            lhs.set_row(r, &op.matrix.row(r));
            rhs.row_mut(r).fill(0.0);
        }
        let singular =
            || GridError::Singular { length: op.grid.length(), n_x: op.grid.n_x(), dt };
        let lu = lhs.clone().lu();
        if !lu.is_invertible() {
            return Err(singular());
        }
        let lu_t = lhs.transpose().lu();
        let probe = lu.solve(&DVector::from_element(m, 1.0)).ok_or_else(singular)?;
        if !probe.iter().all(|v| v.is_finite()) {
            return Err(singular());
        }
        Ok(Self { lhs: lu, lhs_t: lu_t, rhs, boundary_rows: op.boundary_rows, dt, theta })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn boundary_rows(&self) -> [usize; 3] {
        self.boundary_rows
    }

    /// Right-hand side before the implicit solve: explicit part plus `dt·f`,
    /// with boundary entries set to `bc`.
    pub fn assemble_rhs(&self, state: &DVector<f64>, forcing: Option<&DVector<f64>>, bc: [f64; 3]) -> DVector<f64> {
        let mut r = &self.rhs * state;
        if let Some(f) = forcing {
            r.axpy(self.dt, f, 1.0);
        }
        for (k, &row) in self.boundary_rows.iter().enumerate() {
            r[row] = bc[k];
        }
        r
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.lhs.solve(rhs).expect("factorization checked at construction")
    }

    /// Solves with the transposed implicit matrix.
    pub fn solve_transpose(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.lhs_t.solve(rhs).expect("factorization checked at construction")
    }

    /// Explicit matrix with boundary rows zeroed.
    pub fn explicit_matrix(&self) -> &DMatrix<f64> {
        &self.rhs
    }

    pub fn step(&self, state: &DVector<f64>, forcing: Option<&DVector<f64>>, bc: [f64; 3]) -> DVector<f64> {
        self.solve(&self.assemble_rhs(state, forcing, bc))
    }
}

/// One θ-step; factors the implicit matrix on every call. Use [`ThetaStepper`]
/// when marching many steps.
pub fn step_theta(
    state: &DVector<f64>,
    op: &DiscreteOperator,
    dt: f64,
    theta: f64,
    forcing: &DVector<f64>,
    bc_values: [f64; 3],
) -> Result<DVector<f64>, GridError> {
    let m = op.matrix.nrows();
    for len in [state.len(), forcing.len()] {
        if len != m {
            return Err(GridError::Shape { expected: m, got: len });
        }
    }
    Ok(ThetaStepper::new(op, dt, theta)?.step(state, Some(forcing), bc_values))
}
