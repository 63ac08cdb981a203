use std::f64::consts::PI;

use kdv_core::discretization::{assemble_operator, BcFamily, SpatialGrid, TimeGrid};
use kdv_core::profiles::Profile;
use kdv_core::sobolev::{apply_delta_power, apply_delta_power_with, h_s_norm, hidden_regularity_ratio, DeltaRealization, SobolevError};
use kdv_core::solvers::{extract_trace, solve_adjoint, ControlSignal, LinearProblem, StateTrajectory, TracePosition};

fn signal(n: usize, horizon: f64, f: impl Fn(f64) -> f64) -> ControlSignal {
    let tg = TimeGrid::new(horizon, n).unwrap();
    ControlSignal::new(tg, tg.times().into_iter().map(f).collect(), 0.0, None).unwrap()
}

fn adjoint(l: f64, n: usize, family: BcFamily, seed: u64) -> (StateTrajectory, f64) {
    let g = SpatialGrid::new(l, n).unwrap();
    let tg = TimeGrid::new(1.0, 2 * n).unwrap();
    let psi = assemble_operator(&g, family, true).project(&Profile::RandomCompatible { amplitude: 1.0, modes: 4, stream: 0 }.sample(&g, seed));
    let norm = g.norm(psi.as_slice());
    (solve_adjoint(&LinearProblem::adjoint(g, tg, family, psi)).unwrap(), norm)
}

#[test]
fn norm_is_monotone_in_the_index_and_homogeneous() {
    let s = signal(128, 2.0, |t| (3.0 * t).sin() + 0.3 * (11.0 * t).cos());
    let idx = [-1.0, -2.0 / 3.0, -1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let norms: Vec<f64> = idx.iter().map(|&p| h_s_norm(&s, p).unwrap()).collect();
    assert!(norms.windows(2).all(|w| w[0] <= w[1]));
    let scaled = ControlSignal { samples: s.samples.iter().map(|v| -2.5 * v).collect(), ..s.clone() };
    for &p in &idx {
        assert!((h_s_norm(&scaled, p).unwrap() - 2.5 * h_s_norm(&s, p).unwrap()).abs() <= 1e-14 * h_s_norm(&scaled, p).unwrap());
    }
}

#[test]
fn cosine_mode_weight() {
    // a single cosine mode k has norm ratio (1 + (kπ/T)²)^{s/2}
    let horizon = 1.5;
    for k in [1.0, 4.0] {
        let s = signal(96, horizon, |t| (k * PI * t / horizon).cos());
        let lam = (k * PI / horizon).powi(2);
        let r = h_s_norm(&s, -1.0 / 3.0).unwrap() / h_s_norm(&s, 0.0).unwrap();
        assert!((r - (1.0 + lam).powf(-1.0 / 6.0)).abs() < 1e-12);
    }
}

#[test]
fn delta_power_is_linear_and_invertible() {
    let a = signal(200, 1.0, |t| t * (1.0 - t) * (7.0 * t).sin());
    let b = signal(200, 1.0, |t| (2.0 * t).exp());
    let sum = ControlSignal { samples: a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect(), ..a.clone() };
    for e in [-1.0 / 3.0, 1.0 / 3.0] {
        let pa = apply_delta_power(&a, e).unwrap();
        let pb = apply_delta_power(&b, e).unwrap();
        let ps = apply_delta_power(&sum, e).unwrap();
        let scale = ps.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..ps.samples.len() {
            assert!((ps.samples[k] - pa.samples[k] - pb.samples[k]).abs() <= 1e-12 * scale);
        }
        let back = apply_delta_power(&ps, -e).unwrap();
        let peak = sum.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(back.samples.iter().zip(&sum.samples).all(|(x, y)| (x - y).abs() <= 1e-12 * peak));
    }
}

#[test]
fn realizations_agree_away_from_the_ends() {
    // the kernel decays like e^{-|t|}, so a bump ten units from either end
    // cannot tell a reflected extension from a zero one
    let s = signal(2000, 20.0, |t| (-(t - 10.0) * (t - 10.0)).exp());
    let c = apply_delta_power_with(&s, -1.0 / 3.0, DeltaRealization::Cosine).unwrap();
    let f = apply_delta_power_with(&s, -1.0 / 3.0, DeltaRealization::ZeroPaddedFourier).unwrap();
    let mid = s.samples.len() / 2;
    assert!((c.samples[mid] - f.samples[mid]).abs() < 1e-3 * c.samples[mid].abs(), "{} {}", c.samples[mid], f.samples[mid]);
}

#[test]
fn zero_trajectory_and_data_guard() {
    let (mut traj, _) = adjoint(1.0, 16, BcFamily::A, 0);
    traj.samples.fill(0.0);
    assert_eq!(hidden_regularity_ratio(&traj, 0.0).unwrap(), 0.0);
    traj.samples[(3, 4)] = 1.0;
    assert!(matches!(hidden_regularity_ratio(&traj, 0.0), Err(SobolevError::InconsistentDataNorm)));
}

#[test]
fn trace_ratios_bounded_under_refinement() {
    for family in [BcFamily::A, BcFamily::B] {
        let r: Vec<f64> = [64, 128, 256].iter().map(|&n| {
            let (t, d) = adjoint(4.0, n, family, 5);
            hidden_regularity_ratio(&t, d).unwrap()
        }).collect();
        let hi = r.iter().copied().fold(0.0, f64::max);
        let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(hi / lo < 1.2, "{family:?} {r:?}");
    }
}

#[test]
fn right_trace_bounded_across_random_terminal_states() {
    let mut ratios = Vec::new();
    for seed in 0..10u64 {
        let (t, d) = adjoint(4.0, 96, BcFamily::A, seed);
        let tr = extract_trace(&t, 0, TracePosition::Right).unwrap();
        ratios.push(h_s_norm(&tr, 1.0 / 3.0).unwrap() / d);
    }
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    println!("ψ(L,·) H^1/3 / ‖ψ_T‖ over 10 draws: {lo:.3}..{hi:.3}");
    assert!(hi.is_finite() && hi < 10.0 * lo.max(1e-3));
}
