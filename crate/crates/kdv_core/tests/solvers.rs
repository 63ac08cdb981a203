use std::f64::consts::PI;

use kdv_core::discretization::{assemble_operator, BcFamily, Channel, SpatialGrid, TimeGrid};
use kdv_core::solvers::{
    extract_trace, solve_adjoint, solve_forward_linear, solve_forward_nonlinear, xt_norm, Forcing, LinearProblem,
    TracePosition,
};
use kdv_core::verification::{convergence_study, energy_defects, manufactured_error, MmsCase};

fn grids(n: usize, nt: usize) -> (SpatialGrid, TimeGrid) {
    (SpatialGrid::new(1.0, n).unwrap(), TimeGrid::new(1.0, nt).unwrap())
}

fn signal(tgrid: &TimeGrid, f: impl Fn(f64) -> f64) -> Vec<f64> {
    tgrid.times().into_iter().map(f).collect()
}

#[test]
fn manufactured_orders_on_fine_pairs() {
    for case in [MmsCase::Forward(BcFamily::A), MmsCase::Forward(BcFamily::B), MmsCase::Adjoint(BcFamily::A), MmsCase::Adjoint(BcFamily::B)] {
        let (errors, orders) = convergence_study(case, &[64, 128, 256]).unwrap();
        assert!(errors.windows(2).all(|e| e[1] < e[0]), "{case:?} {errors:?}");
        assert!(orders.iter().all(|p| (1.6..2.4).contains(p)), "{case:?} {orders:?}");
    }
}

#[test]
fn manufactured_error_on_longer_domain() {
    // the exact solution scales with L, so this also checks the stencils' dx scaling
    let coarse = manufactured_error(MmsCase::Forward(BcFamily::B), 64, 64, 3.0, 1.0).unwrap();
    let fine = manufactured_error(MmsCase::Forward(BcFamily::B), 128, 128, 3.0, 1.0).unwrap();
    let order = (coarse / fine).log2();
    assert!((1.6..2.4).contains(&order), "{order}");
}

#[test]
fn superposition_of_data() {
    let (g, tg) = grids(48, 64);
    let ya = g.sample(|x| (PI * x).sin());
    let yb = g.sample(|x| x * (1.0 - x).powi(2));
    let ha = signal(&tg, |t| (3.0 * t).sin());
    let hb = signal(&tg, |t| t * t);
    for family in [BcFamily::A, BcFamily::B] {
        let solve = |y: &nalgebra::DVector<f64>, h: &Vec<f64>| {
            solve_forward_linear(&LinearProblem::forward(g, tg, family, y.clone()).with_boundary(Channel::Three, h.clone())).unwrap()
        };
        let sum_h: Vec<f64> = ha.iter().zip(&hb).map(|(a, b)| a + b).collect();
        let joint = solve(&(&ya + &yb), &sum_h);
        let split = solve(&ya, &ha).samples + solve(&yb, &hb).samples;
        assert!((joint.samples - split).amax() < 1e-12);
    }
}

#[test]
fn family_b_reproduces_family_a_given_its_right_value() {
    // A's solution satisfies every row of B's system once g2 is A's own y(L, t).
    let (g, tg) = grids(64, 128);
    let y0 = assemble_operator(&g, BcFamily::A, false).project(&g.sample(|x| x * x * (1.0 - x)));
    let h1 = signal(&tg, |t| 0.2 * (2.0 * PI * t).sin());
    let h2 = signal(&tg, |t| t * (1.0 - t));
    let h3 = signal(&tg, |t| 0.5 * t);
    let a = solve_forward_linear(
        &LinearProblem::forward(g, tg, BcFamily::A, y0.clone())
            .with_boundary(Channel::One, h1.clone())
            .with_boundary(Channel::Two, h2.clone())
            .with_boundary(Channel::Three, h3),
    )
    .unwrap();
    let g2: Vec<f64> = (0..tg.n_levels()).map(|k| a.samples[(k, g.n_x())]).collect();
    let b = solve_forward_linear(
        &LinearProblem::forward(g, tg, BcFamily::B, y0)
            .with_boundary(Channel::One, h1)
            .with_boundary(Channel::Two, g2)
            .with_boundary(Channel::Three, h2),
    )
    .unwrap();
    // level 0 holds the raw initial state in both runs
    let diff = (a.samples.rows(1, tg.n_t()) - b.samples.rows(1, tg.n_t())).amax();
    assert!(diff < 1e-10 * a.samples.amax(), "{diff}");
}

#[test]
fn homogeneous_energy_decays() {
    let (g, tg) = grids(96, 192);
    for family in [BcFamily::A, BcFamily::B] {
        let y0 = assemble_operator(&g, family, false).project(&g.sample(|x| (PI * x).sin() * x));
        let traj = solve_forward_linear(&LinearProblem::forward(g, tg, family, y0)).unwrap();
        // one-sided boundary stencils allow per-step rises of order dx² only
        let e: Vec<f64> = (1..tg.n_levels()).map(|k| traj.energy(k)).collect();
        assert!(e.windows(2).all(|w| w[1] - w[0] <= 1e-5 * e[0]), "{family:?}");
        assert!(*e.last().unwrap() < 0.5 * e[0]);
        let budget = energy_defects(&traj, false);
        assert!(budget.max_admissible() < 1e-3 * traj.energy(0));
    }
}

#[test]
fn adjoint_energy_grows_backward_in_time_toward_zero() {
    // forward-time flux is a sum of squares, so ‖ψ(t)‖ increases with t
    let (g, tg) = grids(96, 192);
    for family in [BcFamily::A, BcFamily::B] {
        let psi_t = assemble_operator(&g, family, true).project(&g.sample(|x| x * x * (1.0 - x).powi(3)));
        let traj = solve_adjoint(&LinearProblem::adjoint(g, tg, family, psi_t)).unwrap();
        let e: Vec<f64> = (0..tg.n_levels()).map(|k| traj.energy(k)).collect();
        let top = e[tg.n_t()];
        assert!(e.windows(2).all(|w| w[0] - w[1] <= 1e-5 * top), "{family:?}");
        assert!(e[0] < top);
    }
}

#[test]
fn nonlinear_defect_is_quadratic_in_amplitude() {
    let (g, tg) = grids(64, 128);
    let shape = g.sample(|x| (PI * x).sin());
    let gap = |delta: f64| {
        let p = LinearProblem::forward(g, tg, BcFamily::A, &shape * delta);
        let lin = solve_forward_linear(&p).unwrap();
        let nl = solve_forward_nonlinear(&p, 1e-14).unwrap();
        xt_norm(&g, &tg, &(nl.samples - lin.samples)) / (delta * delta)
    };
    let k1 = gap(1e-2);
    let k2 = gap(5e-3);
    assert!(k1 > 0.0);
    assert!((k1 / k2 - 1.0).abs() < 0.02, "{k1} {k2}");
}

#[test]
fn source_term_enters_linearly() {
    let (g, tg) = grids(32, 40);
    let f = nalgebra::DMatrix::from_fn(tg.n_levels(), g.n_nodes(), |k, i| (k as f64 * 0.1).cos() * (i as f64 * 0.2).sin());
    let zero = nalgebra::DVector::zeros(g.n_nodes());
    let run = |scale: f64| {
        solve_forward_linear(&LinearProblem::forward(g, tg, BcFamily::B, zero.clone()).with_forcing(Forcing::Nodal(&f * scale))).unwrap()
    };
    let one = run(1.0);
    let two = run(2.0);
    assert!((two.samples - &one.samples * 2.0).amax() < 1e-13 * one.samples.amax());
    assert!(one.samples.amax() > 0.0);
}

#[test]
fn boundary_traces_match_imposed_data() {
    let (g, tg) = grids(64, 64);
    let h1 = signal(&tg, |t| (4.0 * t).sin());
    let g2 = signal(&tg, |t| t * t);
    let traj = solve_forward_linear(
        &LinearProblem::forward(g, tg, BcFamily::B, nalgebra::DVector::zeros(g.n_nodes()))
            .with_boundary(Channel::One, h1.clone())
            .with_boundary(Channel::Two, g2.clone()),
    )
    .unwrap();
    let left = extract_trace(&traj, 0, TracePosition::Left).unwrap();
    let right = extract_trace(&traj, 0, TracePosition::Right).unwrap();
    for k in 1..tg.n_levels() {
        assert!((left.samples[k] - h1[k]).abs() < 1e-12);
        assert!((right.samples[k] - g2[k]).abs() < 1e-12);
    }
}
