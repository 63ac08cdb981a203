//! Deterministic initial, target and terminal profiles.
//!
//! Random profiles draw Gaussian coefficients from ChaCha8 keyed by a 64-bit
//! seed and a stream id, so every draw is reproducible across platforms.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::discretization::SpatialGrid;

#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    Zero,
    /// `amplitude · sin(mode·πx/L)`.
    Sine { amplitude: f64, mode: u32 },
    /// `amplitude · sin(mode·πx/L) · x/L`.
    SineRamp { amplitude: f64, mode: u32 },
    /// Gaussian sine series over `modes` terms with `1/j` decay, scaled to
    /// L² norm `amplitude`.
    Random { amplitude: f64, modes: u32, stream: u64 },
    /// Random series multiplied by `(x/L)²(1 - x/L)³`: vanishes with two
    /// derivatives at `x = L` and with one at `x = 0`, so it satisfies every
    /// homogeneous adjoint boundary row. Scaled to L² norm `amplitude`.
    RandomCompatible { amplitude: f64, modes: u32, stream: u64 },
}

/// Gaussian coefficients for `(seed, stream)`.
pub fn gaussian(seed: u64, stream: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count).map(|_| StandardNormal.sample(&mut rng)).collect()
}

impl Profile {
    pub fn sample(&self, grid: &SpatialGrid, seed: u64) -> DVector<f64> {
        let l = grid.length();
        let pi = std::f64::consts::PI;
        match *self {
            Profile::Zero => DVector::zeros(grid.n_nodes()),
            Profile::Sine { amplitude, mode } => grid.sample(|x| amplitude * (mode as f64 * pi * x / l).sin()),
            Profile::SineRamp { amplitude, mode } => grid.sample(|x| amplitude * (mode as f64 * pi * x / l).sin() * x / l),
            Profile::Random { amplitude, modes, stream } | Profile::RandomCompatible { amplitude, modes, stream } => {
                let c = gaussian(seed, stream, modes as usize);
                let envelope = matches!(self, Profile::RandomCompatible { .. });
                let raw = grid.sample(|x| {
                    let u = x / l;
                    let series = |f: fn(f64) -> f64| -> f64 {
                        c.iter().enumerate().map(|(j, cj)| cj / (j + 1) as f64 * f((j + 1) as f64 * pi * u)).sum()
                    };
                    if envelope {
                        series(f64::cos) * u * u * (1.0 - u).powi(3)
                    } else {
                        series(f64::sin)
                    }
                });
                let n = grid.norm(raw.as_slice());
                if n == 0.0 {
                    raw
                } else {
                    raw * (amplitude / n)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_profiles_are_reproducible() {
        let g = SpatialGrid::new(1.0, 32).unwrap();
        let p = Profile::Random { amplitude: 0.3, modes: 5, stream: 7 };
        assert_eq!(p.sample(&g, 11), p.sample(&g, 11));
        assert_ne!(p.sample(&g, 11), p.sample(&g, 12));
        assert!((g.norm(p.sample(&g, 11).as_slice()) - 0.3).abs() < 1e-14);
        assert_ne!(gaussian(1, 0, 4), gaussian(1, 1, 4));
    }

    #[test]
    fn compatible_profile_vanishes_at_the_ends() {
        let g = SpatialGrid::new(2.0, 64).unwrap();
        let v = Profile::RandomCompatible { amplitude: 1.0, modes: 4, stream: 0 }.sample(&g, 3);
        assert_eq!(v[0], 0.0);
        assert!(v[64].abs() < 1e-15);
    }
}
