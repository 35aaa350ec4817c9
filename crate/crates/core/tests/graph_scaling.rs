use invman::experiments::{invariance_residual, ladder, Setup, StudyParams, Summary};
use invman::manifold::{
    cbeta_norm, closed_form_shape, deterministic_graph, hbar1, solve_graph, LpSolverConfig,
};
use invman::nonlinear::{choose_truncation_radius, NonlinearitySpec};
use invman::{OuTrajectory, SpectralModel, SpectralVector, WienerPath};

fn setup(target_sc: f64, chart: f64, dt: f64) -> Setup {
    let model = SpectralModel::build_sine(8, 3.0, 0.0, 32).unwrap();
    let mut solver = LpSolverConfig::defaults(&model);
    solver.chart_factor = chart;
    solver.dt = dt;
    let base = NonlinearitySpec::new(2.0, false, 1.0).unwrap();
    let ch = choose_truncation_radius(target_sc, &base, &model, solver.beta, 1000, 1).unwrap();
    Setup {
        spec: base
            .with_radius(ch.radius)
            .unwrap()
            .with_lipschitz(ch.lipschitz),
        model,
        solver,
        t_ou: 40.0,
    }
}

fn xi(r: f64) -> SpectralVector {
    SpectralVector::mode(8, 1).scaled(r)
}

fn noisy_path(s: &Setup, seed: u64, sigma: f64) -> OuTrajectory {
    let dt = s.solver.dt;
    let back = s.solver.steps() as f64 * dt + s.t_ou;
    let path = WienerPath::sample(seed, -back, 0.0, dt).unwrap();
    OuTrajectory::from_path(&path, sigma, s.t_ou).unwrap()
}

#[test]
fn iterations_respect_the_geometric_bound() {
    let s = setup(0.5, 0.5, 0.01);
    for r in [0.04, 0.02, 0.01, 0.005] {
        let (_, _, rep) = deterministic_graph(&xi(r), &s.spec, &s.model, &s.solver).unwrap();
        let bound = (s.solver.tolerance / rep.initial_increment).ln() / rep.sc.ln() + 1.0;
        assert!(
            rep.iterations as f64 <= bound,
            "r = {r}: {} > {bound}",
            rep.iterations
        );
    }
}

#[test]
fn solution_norm_is_linear_in_xi() {
    let s = setup(0.5, 0.5, 0.01);
    let ou = noisy_path(&s, 17, 0.1);
    for path in [OuTrajectory::deterministic(-20.0, 0.0, 0.01).unwrap(), ou] {
        let ratio = |r: f64| {
            let (v, _, _) = solve_graph(&xi(r), &path, &s.spec, &s.model, &s.solver).unwrap();
            cbeta_norm(&v, s.solver.beta, &path, &s.model).unwrap() / r
        };
        let (a, b) = (ratio(0.01), ratio(0.005));
        assert!((a - b).abs() < 0.1 * a, "{a} vs {b}");
    }
}

#[test]
fn first_ladder_step_is_bounded_by_xi() {
    let s = setup(0.5, 0.5, 0.01);
    let ou = noisy_path(&s, 23, 0.1);
    let ratio = |r: f64| {
        let (v, p, _) = solve_graph(&xi(r), &ou, &s.spec, &s.model, &s.solver).unwrap();
        let h1 = hbar1(&v, &ou, &s.spec, &s.model, &s.solver).unwrap();
        p.h_value.sub(&h1).norm() / r
    };
    let (a, b, c) = (ratio(0.02), ratio(0.01), ratio(0.005));
    assert!(b <= 1.1 * a && c <= 1.1 * b, "{a} {b} {c}");
}

#[test]
fn relative_shape_error_shrinks_with_xi() {
    // A fine step keeps the discretization floor below the O(r) term.
    let s = setup(0.5, 0.5, 0.002);
    let rel = |r: f64| {
        let (_, p, _) = deterministic_graph(&xi(r), &s.spec, &s.model, &s.solver).unwrap();
        let cf = closed_form_shape(&xi(r), &s.spec, &s.model).unwrap();
        p.h_value.sub(&cf).norm() / cf.norm()
    };
    let e: Vec<f64> = [0.01, 0.005, 0.0025].iter().map(|&r| rel(r)).collect();
    assert!(e[1] < e[0] && e[2] < e[1], "{e:?}");
}

#[test]
fn graph_is_lipschitz_in_xi() {
    let s = setup(0.5, 0.5, 0.01);
    let ou = noisy_path(&s, 31, 0.1);
    let chart = 0.5 * s.spec.radius;
    let h = |r: f64| {
        solve_graph(&xi(r), &ou, &s.spec, &s.model, &s.solver)
            .unwrap()
            .1
            .h_value
    };
    let ratios: Vec<f64> = (0..12)
        .map(|i| {
            let a = chart * (0.05 + 0.07 * i as f64);
            let b = -chart * (0.9 - 0.06 * i as f64);
            h(a).sub(&h(b)).norm() / (a - b).abs()
        })
        .collect();
    let fitted = ratios[..6].iter().cloned().fold(0.0, f64::max);
    assert!(ratios.iter().all(|&q| q <= 1.5 * fitted), "{ratios:?}");
}

#[test]
fn deterministic_invariance_residual_is_small() {
    let s = setup(0.5, 1.0, 0.005);
    let params = StudyParams {
        radius_list: vec![0.05],
        deterministic: true,
        delta_t: 0.1,
        dt_flow: 0.02,
        ..StudyParams::default()
    };
    let res = invariance_residual(&s, &params).unwrap();
    let Summary::Invariance(sum) = &res.summary else {
        panic!()
    };
    assert_eq!(res.failures, 0);
    assert!(sum.rho_max <= 1e-3 * 0.05, "ρ = {}", sum.rho_max);
}

#[test]
fn stochastic_ladder_gap_is_quadratic() {
    let s = setup(0.8, 1.0, 0.01);
    let params = StudyParams {
        sigma_list: vec![0.1],
        radius_list: vec![0.04, 0.02, 0.01],
        n_samples: 3,
        base_seed: 2,
        ..StudyParams::default()
    };
    let res = ladder(&s, &params).unwrap();
    let Summary::Ladder(sum) = &res.summary else {
        panic!()
    };
    assert_eq!(res.failures, 0);
    assert!(
        sum.hbar23_variation[0].1 < 0.25,
        "{:?}",
        sum.hbar23_variation
    );
    assert!(sum.h_hbar2_monotone[0].1);
}
