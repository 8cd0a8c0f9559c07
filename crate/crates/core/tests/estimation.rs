//! End-to-end estimator behaviour on simulated panels.

use snmm::gestimation::{
    bootstrap_design, closed_form_fit, crossfit_estimate, evaluate_u, fit, solve_iterative, Design, FitOptions,
    Method,
};
use snmm::simulation::{entry, gallery, misspecify, simulate_panel, Misspecification};
use snmm::Error;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn every_gallery_model_fits_its_own_data() {
    for e in gallery() {
        let data = simulate_panel(&e.dgp, 4_000, 31).unwrap();
        let model = e.model.build(&data, None).unwrap();
        let method = if e.dgp.name == "multiplicative" {
            Method::Iterative
        } else {
            Method::ClosedForm
        };
        let g = fit(&data, &model, &e.nuisance, &FitOptions::method(method))
            .unwrap_or_else(|err| panic!("{}: {err}", e.dgp.name));
        assert_eq!(g.dim(), e.psi.len(), "{}", e.dgp.name);
        assert!(g.se.iter().all(|s| s.is_finite() && *s > 0.0), "{}", e.dgp.name);
        if e.dgp.violation.is_none() {
            for t in 0..g.dim() {
                let z = (g.psi_hat[t] - e.psi[t]) / g.se[t];
                assert!(z.abs() < 4.5, "{} {}: z = {z}", e.dgp.name, g.names[t]);
            }
        }
    }
}

#[test]
fn estimators_agree_on_one_dataset() {
    let e = entry("standard-general").unwrap();
    let data = simulate_panel(&e.dgp, 5_000, 32).unwrap();
    let model = e.model.build(&data, None).unwrap();
    let opts = FitOptions::default();
    let cf = closed_form_fit(&data, &model, &e.nuisance, &opts).unwrap();
    let it = solve_iterative(&data, &model, &e.nuisance, &opts).unwrap();
    let xf = crossfit_estimate(&data, &model, &e.nuisance, &opts).unwrap();
    assert!(max_diff(&cf.psi_hat, &it.psi_hat) < 1e-8);
    assert_eq!(xf.fold_estimates.len(), e.nuisance.folds);
    // Cross-fitting changes the nuisances, not the target: within a few SEs.
    for t in 0..cf.dim() {
        assert!((cf.psi_hat[t] - xf.psi_hat[t]).abs() < 3.0 * cf.se[t]);
    }
    assert_eq!(cf.diagnostics.jacobian, "exact");
}

#[test]
fn moments_vanish_at_the_estimate() {
    let e = entry("coarse-staggered").unwrap();
    let data = simulate_panel(&e.dgp, 2_000, 33).unwrap();
    let model = e.model.build(&data, None).unwrap();
    let opts = FitOptions::default();
    let g = fit(&data, &model, &e.nuisance, &opts).unwrap();
    let u = evaluate_u(&data, &model, &g.psi_hat, &e.nuisance, &opts).unwrap();
    let n = u.len() as f64;
    for t in 0..g.dim() {
        let mean = u.iter().map(|ui| ui[t]).sum::<f64>() / n;
        assert!(mean.abs() < 1e-8, "{}: {mean}", g.names[t]);
    }
    // Influence values average to zero and reproduce the covariance.
    for t in 0..g.dim() {
        let m = g.influence.iter().map(|r| r[t]).sum::<f64>() / n;
        assert!(m.abs() < 1e-8);
        let v = g.influence.iter().map(|r| r[t] * r[t]).sum::<f64>() / (n * n);
        assert!((v - g.covariance[t][t]).abs() < 1e-10 * (1.0 + v));
    }
}

#[test]
fn ridge_is_recorded_and_shrinks() {
    let e = entry("coarse-staggered").unwrap();
    let data = simulate_panel(&e.dgp, 2_000, 34).unwrap();
    let model = e.model.build(&data, None).unwrap();
    let plain = fit(&data, &model, &e.nuisance, &FitOptions::default()).unwrap();
    let opts = FitOptions {
        ridge: 10.0,
        ..Default::default()
    };
    let ridged = fit(&data, &model, &e.nuisance, &opts).unwrap();
    assert_eq!(plain.diagnostics.ridge, 0.0);
    assert_eq!(ridged.diagnostics.ridge, 10.0);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm(&ridged.psi_hat) < norm(&plain.psi_hat));
}

#[test]
fn unidentified_models_fail_loudly() {
    let e = entry("coarse-staggered").unwrap();
    let data = simulate_panel(&e.dgp, 500, 35).unwrap();
    let rows: Vec<usize> = (0..data.n_subjects())
        .filter(|&i| data.initiation_time(i).time().is_none())
        .collect();
    let never = data.select_subjects(&rows).unwrap();
    let model = e.model.build(&never, None).unwrap();
    match fit(&never, &model, &e.nuisance, &FitOptions::default()) {
        Err(Error::Rank(msg)) => assert!(msg.contains("tau[0,1]"), "{msg}"),
        other => panic!("expected a rank error, got {other:?}"),
    }
}

#[test]
fn both_nuisances_wrong_is_detectably_biased() {
    let e = entry("coarse-staggered").unwrap();
    let data = simulate_panel(&e.dgp, 20_000, 36).unwrap();
    let model = e.model.build(&data, None).unwrap();
    let opts = FitOptions::default();
    let good = fit(&data, &model, &e.nuisance, &opts).unwrap();
    let bad = fit(&data, &model, &misspecify(&e.nuisance, Misspecification::BothWrong), &opts).unwrap();
    let zmax = |g: &snmm::gestimation::GEstimate| {
        (0..g.dim())
            .map(|t| ((g.psi_hat[t] - e.psi[t]) / g.se[t]).abs())
            .fold(0.0, f64::max)
    };
    assert!(zmax(&good) < 4.5);
    assert!(zmax(&bad) > 5.0);
}

#[test]
fn design_bootstrap_is_deterministic_and_seeded() {
    let e = entry("homogeneous").unwrap();
    let data = simulate_panel(&e.dgp, 1_000, 37).unwrap();
    let model = e.model.build(&data, None).unwrap();
    let opts = FitOptions::default();
    let design = Design::build(&data, &model, &e.nuisance, &opts).unwrap();
    let g = design.fit().unwrap();
    let a = bootstrap_design(&design, &g.psi_hat, Method::ClosedForm, 0, 100, 5).unwrap();
    let b = bootstrap_design(&design, &g.psi_hat, Method::ClosedForm, 0, 100, 5).unwrap();
    let c = bootstrap_design(&design, &g.psi_hat, Method::ClosedForm, 0, 100, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.replicates, c.replicates);
    let ratio = a.se[0] / g.se[0];
    assert!((0.7..1.4).contains(&ratio), "bootstrap/IF se ratio {ratio}");
    assert!(matches!(
        bootstrap_design(&design, &g.psi_hat, Method::ClosedForm, 0, 10, 5),
        Err(Error::Config(_))
    ));
}
