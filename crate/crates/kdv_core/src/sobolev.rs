//! Fractional Sobolev norms on (0,T) and powers of `Δt = I - ∂t²`.
//!
//! Both are realized in the Neumann cosine basis `cos(kπt/T)`, which is exactly
//! orthogonal under trapezoid weights on the uniform time grid (DCT-I).

use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::discretization::TimeGrid;
use crate::solvers::{extract_trace, ControlSignal, SolverError, StateTrajectory, TracePosition};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SobolevError {
    #[error("Sobolev index {0} outside [-1, 1]")]
    IndexOutOfRange(f64),
    #[error("signal has {got} samples, basis expects {expected}")]
    Shape { expected: usize, got: usize },
    #[error("data norm is zero but the trajectory is not")]
    InconsistentDataNorm,
    #[error(transparent)]
    Trace(#[from] SolverError),
}

/// How `Δt^e` is extended off the interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaRealization {
    /// Even reflection at both ends (Neumann cosine modes).
    #[default]
    Cosine,
    /// Zero extension to twice the interval, periodic Fourier symbol there.
    ZeroPaddedFourier,
}

/// Orthonormal cosine modes on a time grid with eigenvalues `(kπ/T)²`.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    pub tgrid: TimeGrid,
    /// `modes[(j, k)] = φ_k(t_j)`.
    pub modes: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    weights: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(tgrid: TimeGrid) -> Self {
        let n = tgrid.n_t();
        let t = tgrid.horizon();
        let modes = DMatrix::from_fn(n + 1, n + 1, |j, k| {
            let norm = if k == 0 || k == n { t } else { 0.5 * t };
            // integer phase keeps the DCT-I orthogonality exact in floating point
            let phase = ((j * k) % (2 * n)) as f64 * std::f64::consts::PI / n as f64;
            phase.cos() / norm.sqrt()
        });
        let eigenvalues = (0..=n).map(|k| (k as f64 * std::f64::consts::PI / t).powi(2)).collect();
        Self { tgrid, modes, eigenvalues, weights: tgrid.weights() }
    }

    fn check(&self, samples: &[f64]) -> Result<(), SobolevError> {
        if samples.len() != self.tgrid.n_levels() {
            return Err(SobolevError::Shape { expected: self.tgrid.n_levels(), got: samples.len() });
        }
        Ok(())
    }

    /// Cosine coefficients in the trapezoid inner product.
    pub fn coefficients(&self, samples: &[f64]) -> Vec<f64> {
        let weighted: Vec<f64> = samples.iter().zip(&self.weights).map(|(s, w)| s * w).collect();
        let v = nalgebra::DVector::from_vec(weighted);
        (self.modes.transpose() * v).iter().copied().collect()
    }

    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        let c = nalgebra::DVector::from_column_slice(coeffs);
        (&self.modes * c).iter().copied().collect()
    }

    /// Largest entry of `Φᵀ W Φ - I`.
    pub fn orthonormality_defect(&self) -> f64 {
        let w = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.weights));
        let g = self.modes.transpose() * w * &self.modes;
        (g - DMatrix::identity(self.modes.nrows(), self.modes.nrows())).amax()
    }

    /// `(1 + λ_k)^p` for every mode.
    pub fn weights_pow(&self, p: f64) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| (1.0 + l).powf(p)).collect()
    }

    /// `Φ · diag((1+λ)^{e/2})`; its Gram product `F Fᵀ` is `Δt^e W⁻¹`.
    pub fn smoothing_factor(&self, e: f64) -> DMatrix<f64> {
        let d = self.weights_pow(0.5 * e);
        let mut f = self.modes.clone();
        for (k, dk) in d.iter().enumerate() {
            f.column_mut(k).scale_mut(*dk);
        }
        f
    }

    pub fn h_s_norm(&self, samples: &[f64], s: f64) -> Result<f64, SobolevError> {
        if !(-1.0..=1.0).contains(&s) {
            return Err(SobolevError::IndexOutOfRange(s));
        }
        self.check(samples)?;
        let c = self.coefficients(samples);
        Ok(c.iter().zip(self.weights_pow(s)).map(|(c, w)| w * c * c).sum::<f64>().sqrt())
    }

    pub fn apply_power(&self, samples: &[f64], e: f64) -> Result<Vec<f64>, SobolevError> {
        self.check(samples)?;
        let c: Vec<f64> = self.coefficients(samples).iter().zip(self.weights_pow(e)).map(|(c, w)| c * w).collect();
        Ok(self.synthesize(&c))
    }
}

/// `(Σ_k (1+λ_k)^s |c_k|²)^{1/2}` over cosine coefficients.
pub fn h_s_norm(sig: &ControlSignal, s: f64) -> Result<f64, SobolevError> {
    SpectralBasis::new(sig.tgrid).h_s_norm(&sig.samples, s)
}

/// `Δt^e` in the cosine realization. The Sobolev index moves by `-2e`, so
/// `e = -1/3` takes an `H^{-1/3}` signal to `H^{1/3}`.
pub fn apply_delta_power(sig: &ControlSignal, e: f64) -> Result<ControlSignal, SobolevError> {
    apply_delta_power_with(sig, e, DeltaRealization::Cosine)
}

pub fn apply_delta_power_with(sig: &ControlSignal, e: f64, realization: DeltaRealization) -> Result<ControlSignal, SobolevError> {
    let samples = match realization {
        DeltaRealization::Cosine => SpectralBasis::new(sig.tgrid).apply_power(&sig.samples, e)?,
        DeltaRealization::ZeroPaddedFourier => fourier_power(&sig.samples, sig.tgrid.dt(), e),
    };
    Ok(ControlSignal { samples, sobolev_index: sig.sobolev_index - 2.0 * e, ..sig.clone() })
}

fn fourier_power(samples: &[f64], dt: f64, e: f64) -> Vec<f64> {
    let m = samples.len();
    let n = 2 * m;
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    buf.resize(n, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let period = n as f64 * dt;
    for (q, z) in buf.iter_mut().enumerate() {
        let freq = if q <= n / 2 { q as f64 } else { q as f64 - n as f64 };
        let w = 2.0 * std::f64::consts::PI * freq / period;
        *z *= (1.0 + w * w).powf(e);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf[..m].iter().map(|z| z.re / n as f64).collect()
}

/// Interior positions (fractions of `L`) sampled by [`hidden_regularity_ratio`].
pub const TRACE_FRACTIONS: [f64; 15] = [
    1.0 / 16.0, 2.0 / 16.0, 3.0 / 16.0, 4.0 / 16.0, 5.0 / 16.0, 6.0 / 16.0, 7.0 / 16.0, 8.0 / 16.0,
    9.0 / 16.0, 10.0 / 16.0, 11.0 / 16.0, 12.0 / 16.0, 13.0 / 16.0, 14.0 / 16.0, 15.0 / 16.0,
];

/// `max_x Σ_j ‖∂x^j y(x,·)‖_{H^{(1-j)/3}}` over [`TRACE_FRACTIONS`], divided by
/// `data_norm`. A zero trajectory with zero data norm gives 0.
pub fn hidden_regularity_ratio(traj: &StateTrajectory, data_norm: f64) -> Result<f64, SobolevError> {
    if data_norm <= 0.0 {
        return if traj.samples.amax() == 0.0 { Ok(0.0) } else { Err(SobolevError::InconsistentDataNorm) };
    }
    let basis = SpectralBasis::new(traj.tgrid);
    let mut best: f64 = 0.0;
    for frac in TRACE_FRACTIONS {
        let x = frac * traj.grid.length();
        let mut total = 0.0;
        for j in 0..3 {
            let tr = extract_trace(traj, j, TracePosition::At(x))?;
            total += basis.h_s_norm(&tr.samples, tr.sobolev_index)?;
        }
        best = best.max(total);
    }
    Ok(best / data_norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(n: usize, f: impl Fn(f64) -> f64) -> ControlSignal {
        let tg = TimeGrid::new(1.0, n).unwrap();
        ControlSignal::new(tg, tg.times().into_iter().map(f).collect(), 0.0, None).unwrap()
    }

    #[test]
    fn basis_is_orthonormal() {
        for n in [8, 33, 128] {
            let b = SpectralBasis::new(TimeGrid::new(2.5, n).unwrap());
            assert!(b.orthonormality_defect() < 1e-10);
        }
    }

    #[test]
    fn l2_and_constant_norms() {
        let s = sig(64, |t| (3.0 * t).sin() + t * t);
        assert!((h_s_norm(&s, 0.0).unwrap() / s.l2_norm() - 1.0).abs() < 1e-10);
        let c = sig(64, |_| 2.0);
        for p in [-1.0, -1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0] {
            assert!((h_s_norm(&c, p).unwrap() - 2.0).abs() < 1e-12);
        }
        assert!(h_s_norm(&c, 1.5).is_err());
    }

    #[test]
    fn single_mode_weight() {
        let pi = std::f64::consts::PI;
        let s = sig(64, |t| (3.0 * pi * t).cos());
        let r = h_s_norm(&s, 1.0 / 3.0).unwrap() / h_s_norm(&s, 0.0).unwrap();
        assert!((r - (1.0 + 9.0 * pi * pi).powf(1.0 / 6.0)).abs() < 1e-10);
    }

    #[test]
    fn delta_power_algebra() {
        let s = sig(128, |t| (5.0 * t).sin() * t);
        let up = apply_delta_power(&s, 1.0 / 3.0).unwrap();
        let back = apply_delta_power(&up, -1.0 / 3.0).unwrap();
        let err: f64 = back.samples.iter().zip(&s.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12 * s.samples.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        assert!((back.sobolev_index - s.sobolev_index).abs() < 1e-15);
        let h = ControlSignal { sobolev_index: -1.0 / 3.0, ..s.clone() };
        assert!((apply_delta_power(&h, -1.0 / 3.0).unwrap().sobolev_index - 1.0 / 3.0).abs() < 1e-15);
        let smoothed = apply_delta_power(&s, -1.0 / 3.0).unwrap();
        for p in [0.0, 1.0 / 3.0] {
            let a = h_s_norm(&smoothed, p).unwrap();
            let b = h_s_norm(&s, p - 2.0 / 3.0).unwrap();
            assert!((a - b).abs() < 1e-10 * b);
        }
        let c = sig(32, |_| 1.5);
        let cc = apply_delta_power(&c, -1.0 / 3.0).unwrap();
        assert!(cc.samples.iter().all(|v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn fourier_realization_basics() {
        let s = sig(256, |t| (std::f64::consts::PI * t).sin().powi(4));
        let same = apply_delta_power_with(&s, 0.0, DeltaRealization::ZeroPaddedFourier).unwrap();
        assert!(same.samples.iter().zip(&s.samples).all(|(a, b)| (a - b).abs() < 1e-12));
        let sm = apply_delta_power_with(&s, -1.0 / 3.0, DeltaRealization::ZeroPaddedFourier).unwrap();
        let cs = apply_delta_power_with(&s, -1.0 / 3.0, DeltaRealization::Cosine).unwrap();
        assert_eq!(sm.sobolev_index, cs.sobolev_index);
        // a positive kernel of unit mass cannot raise the maximum
        let peak = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(peak(&sm.samples) <= peak(&s.samples) + 1e-12);
        assert!(sm.samples.iter().all(|v| *v > -1e-12));
    }
}
