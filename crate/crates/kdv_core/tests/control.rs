use std::f64::consts::PI;

use kdv_core::control::{
    assemble_gramian, observability_constant, synthesize_control, ControlConfig, ControlSystem, FinalSpace, HumMode,
};
use kdv_core::discretization::{assemble_operator, BcFamily, Channel, SpatialGrid, TimeGrid};
use kdv_core::profiles::{gaussian, Profile};
use kdv_core::sobolev::{h_s_norm, SpectralBasis};
use kdv_core::solvers::{extract_trace, solve_adjoint, LinearProblem, TracePosition};
use nalgebra::DVector;

fn grids(l: f64, n: usize, horizon: f64, nt: usize) -> (SpatialGrid, TimeGrid) {
    (SpatialGrid::new(l, n).unwrap(), TimeGrid::new(horizon, nt).unwrap())
}

fn system(family: BcFamily, ch: &[Channel], n: usize, nt: usize) -> ControlSystem {
    let (g, tg) = grids(1.0, n, 1.0, nt);
    ControlSystem::new(ControlConfig::new(family, ch).unwrap(), g, tg).unwrap()
}

#[test]
fn control_map_is_linear() {
    let sys = system(BcFamily::A, &[Channel::One, Channel::Three], 32, 48);
    let n = sys.tgrid.n_levels();
    let h: Vec<Vec<f64>> = (0..2).map(|c| gaussian(1, c, n)).collect();
    let k: Vec<Vec<f64>> = (0..2).map(|c| gaussian(2, c, n)).collect();
    let sum: Vec<Vec<f64>> = h.iter().zip(&k).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
    let lhs = sys.apply_map(&sum).unwrap();
    let rhs = sys.apply_map(&h).unwrap() + sys.apply_map(&k).unwrap();
    assert!((&lhs - rhs).amax() <= 1e-12 * lhs.amax());
    assert_eq!(sys.apply_map(&[vec![0.0; n], vec![0.0; n]]).unwrap().amax(), 0.0);
}

#[test]
fn gramian_is_symmetric_semidefinite_for_every_configuration() {
    for family in [BcFamily::A, BcFamily::B] {
        for mask in 1..8u32 {
            let ch: Vec<Channel> = Channel::ALL.into_iter().filter(|c| mask & (1 << c.index()) != 0).collect();
            let g = system(family, &ch, 32, 64);
            let gram = g.gramian();
            assert!(gram.asymmetry() <= 1e-12);
            assert!(gram.sigma_min() >= -1e-10 * gram.norm(), "{}", g.config.id());
        }
    }
}

#[test]
fn adding_channels_never_raises_the_constant() {
    for family in [BcFamily::A, BcFamily::B] {
        let c = |ch: &[Channel]| system(family, ch, 32, 64).gramian().observability_constant();
        let single = c(&[Channel::Two]);
        let pair = c(&[Channel::One, Channel::Two]);
        let all = c(&Channel::ALL);
        assert!(pair <= single && all <= pair, "{family:?} {single} {pair} {all}");
    }
}

#[test]
fn single_right_input_is_observable_at_unit_length() {
    let (g, tg) = grids(1.0, 48, 1.0, 96);
    let cfg = ControlConfig::new(BcFamily::A, &[Channel::Two]).unwrap();
    let gram = assemble_gramian(&cfg, g, tg).unwrap();
    assert!(gram.sigma_min() > 0.0);
    assert!(observability_constant(&cfg, g, tg).unwrap().is_finite());
}

#[test]
fn continuous_mode_quadratic_form_is_the_trace_energy() {
    // the Gramian is assembled from batched observations of basis vectors; an
    // independent adjoint solve of a combination must give the same energy
    let (g, tg) = grids(1.0, 48, 1.0, 96);
    let cfg = ControlConfig::new(BcFamily::A, &[Channel::Two]).unwrap().with_hum(HumMode::Continuous);
    let sys = ControlSystem::new(cfg, g, tg).unwrap();
    let wt = tg.weights();
    for seed in 0..10u64 {
        let c = DVector::from_vec(gaussian(seed, 0, sys.dim()));
        let psi = sys.expand(&c);
        let traj = solve_adjoint(&LinearProblem::adjoint(g, tg, BcFamily::A, psi)).unwrap();
        let trace = extract_trace(&traj, 1, TracePosition::Right).unwrap();
        let energy: f64 = trace.samples.iter().zip(&wt).map(|(v, w)| w * v * v).sum();
        let form = c.dot(&(&sys.gramian().matrix * &c));
        assert!((form - energy).abs() <= 1e-10 * energy, "{form} {energy}");
    }
}

#[test]
fn discrete_observation_matches_adjoint_trace_on_slow_modes() {
    let (g, tg) = grids(1.0, 192, 1.0, 384);
    let cfg = ControlConfig::new(BcFamily::A, &[Channel::Two]).unwrap().with_final_space(FinalSpace::Modal { modes: 2 });
    let discrete = ControlSystem::new(cfg.clone(), g, tg).unwrap();
    let continuous = ControlSystem::new(cfg.with_hum(HumMode::Continuous), g, tg).unwrap();
    let basis = SpectralBasis::new(tg);
    for seed in 0..3u64 {
        let psi = assemble_operator(&g, BcFamily::A, true)
            .project(&Profile::RandomCompatible { amplitude: 1.0, modes: 4, stream: 0 }.sample(&g, seed));
        let a = basis.coefficients(&discrete.observe(&psi).unwrap()[0]);
        let b = basis.coefficients(&continuous.observe(&psi).unwrap()[0]);
        let scale = b[..8].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gap = (0..8).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-2 * scale, "seed {seed}: {gap} vs {scale}");
    }
}

#[test]
fn steers_between_seeded_states_for_both_families() {
    let (g, tg) = grids(1.0, 64, 1.0, 128);
    let y0 = Profile::Random { amplitude: 0.1, modes: 4, stream: 0 }.sample(&g, 11);
    let yt = Profile::Random { amplitude: 0.1, modes: 4, stream: 1 }.sample(&g, 11);
    for (family, ch) in [
        (BcFamily::A, vec![Channel::Two]),
        (BcFamily::B, vec![Channel::One, Channel::Three]),
        (BcFamily::B, vec![Channel::Three]),
    ] {
        let cfg = ControlConfig::new(family, &ch).unwrap();
        let r = synthesize_control(&cfg, g, tg, &y0, &yt, 1e-12).unwrap();
        assert!(r.relative_error <= 1e-6, "{} {}", cfg.id(), r.relative_error);
        assert_eq!(r.controls.len(), ch.len());
    }
}

#[test]
fn null_control_from_nonzero_state() {
    let sys = system(BcFamily::A, &[Channel::Two], 96, 256);
    let y0 = sys.grid.sample(|x| 0.1 * (PI * x).sin());
    let zero = DVector::zeros(sys.grid.n_nodes());
    let r = sys.synthesize(&y0, &zero, 1e-12).unwrap();
    assert!(r.relative_error <= 1e-6, "{}", r.relative_error);
}

#[test]
fn replay_is_independent_of_the_gramian() {
    let sys = system(BcFamily::A, &[Channel::Two, Channel::Three], 48, 96);
    let y0 = sys.grid.sample(|x| 0.1 * (PI * x).sin());
    let yt = sys.grid.sample(|x| 0.1 * (2.0 * PI * x).sin() * x);
    let r = sys.synthesize(&y0, &yt, 1e-12).unwrap();
    let controls: Vec<Vec<f64>> = r.controls.iter().map(|c| c.samples.clone()).collect();
    let again = sys.trajectory(&y0, &controls, &kdv_core::solvers::Forcing::None).unwrap().final_state();
    assert_eq!(again, r.achieved_final);
    assert!(sys.relative_error(&again, &y0, &yt) <= 1e-6);
}

#[test]
fn conjugate_gradient_path_on_fine_grids() {
    // above the direct-solve threshold the Gramian goes through CG
    let (g, tg) = grids(1.0, 160, 1.0, 320);
    let sys = ControlSystem::new(ControlConfig::new(BcFamily::A, &[Channel::One, Channel::Two]).unwrap(), g, tg).unwrap();
    let y0 = g.sample(|x| 0.1 * (PI * x).sin());
    let yt = g.sample(|x| 0.05 * (3.0 * PI * x).sin());
    let r = sys.synthesize(&y0, &yt, 1e-12).unwrap();
    assert!(r.cg_iterations > 0);
    assert!(r.relative_error <= 1e-6, "{}", r.relative_error);
}

#[test]
fn smoothed_left_channel_still_steers() {
    let (g, tg) = grids(1.0, 64, 1.0, 128);
    let cfg = ControlConfig::new(BcFamily::A, &[Channel::One, Channel::Two]).unwrap().with_smoothing(Channel::One, -1.0 / 3.0);
    let sys = ControlSystem::new(cfg, g, tg).unwrap();
    assert!(sys.gramian().asymmetry() <= 1e-12);
    let y0 = g.sample(|x| 0.1 * (PI * x).sin());
    let yt = g.sample(|x| 0.1 * (2.0 * PI * x).sin());
    let r = sys.synthesize(&y0, &yt, 1e-12).unwrap();
    assert!(r.relative_error <= 1e-6);
    for c in &r.controls {
        assert!(h_s_norm(c, c.sobolev_index).unwrap().is_finite());
    }
}

#[test]
fn regularization_reports_at_a_critical_length() {
    let (g, tg) = grids(2.0 * PI, 64, 2.0 * PI, 128);
    let cfg = ControlConfig::new(BcFamily::B, &[Channel::Three]).unwrap();
    let plain = ControlSystem::new(cfg.clone(), g, tg).unwrap();
    let eps = 1e-10 * plain.gramian().norm();
    let sys = ControlSystem::new(cfg.with_epsilon(eps), g, tg).unwrap();
    let y0 = g.sample(|x| 0.1 * (PI * x / g.length()).sin());
    let r = sys.synthesize(&y0, &DVector::zeros(g.n_nodes()), 1e-12).unwrap();
    assert!(r.relative_error.is_finite());
    assert!(r.gramian_sigma_min > 0.0);
}

#[test]
fn right_value_control_norm_under_refinement() {
    // measured only: the H^{-1/3} norm of the single h3 control on two grids
    let mut norms = Vec::new();
    for n in [48, 96] {
        let (g, tg) = grids(1.0, n, 1.0, 2 * n);
        let sys = ControlSystem::new(ControlConfig::new(BcFamily::A, &[Channel::Three]).unwrap(), g, tg).unwrap();
        let y0 = g.sample(|x| 0.1 * (PI * x).sin());
        let r = sys.synthesize(&y0, &DVector::zeros(g.n_nodes()), 1e-12).unwrap();
        norms.push(h_s_norm(&r.controls[0], -1.0 / 3.0).unwrap());
    }
    println!("h3 control H^-1/3 norms at n_x 48/96: {norms:?}");
    assert!(norms.iter().all(|v| v.is_finite() && *v > 0.0));
}
