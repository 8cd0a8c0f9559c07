//! Simulation gallery and oracle sanity checks.

use snmm::simulation::{
    entry, expectation, gallery, oracle_truth, simulate_panel, DgpConfig, Misspecification,
};

#[test]
fn gallery_entries_validate_and_round_trip() {
    let names: Vec<String> = gallery().into_iter().map(|e| e.dgp.name).collect();
    for name in [
        "coarse-staggered",
        "null",
        "homogeneous",
        "standard-general",
        "multiplicative",
        "violation",
        "regime",
        "cde",
    ] {
        assert!(names.iter().any(|n| n == name), "missing {name}");
    }
    for e in gallery() {
        e.dgp.validate().unwrap();
        let text = serde_json::to_string(&e.dgp).unwrap();
        assert_eq!(serde_json::from_str::<DgpConfig>(&text).unwrap(), e.dgp);
    }
    assert!(entry("no-such-entry").is_none());
}

#[test]
fn simulation_is_seed_deterministic() {
    let e = entry("standard-general").unwrap();
    let a = simulate_panel(&e.dgp, 200, 1).unwrap();
    let b = simulate_panel(&e.dgp, 200, 1).unwrap();
    let c = simulate_panel(&e.dgp, 200, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.n_subjects(), 200);
    assert_eq!(a.horizon(), e.dgp.horizon);
}

#[test]
fn staggered_entries_produce_staggered_panels() {
    for name in ["coarse-staggered", "homogeneous", "violation", "null"] {
        let e = entry(name).unwrap();
        let d = simulate_panel(&e.dgp, 500, 3).unwrap();
        assert!(d.is_staggered_adoption(), "{name}");
        let h = d.initiation_histogram();
        assert!(h.len() > 2, "{name}: initiation times should vary, got {h:?}");
    }
}

#[test]
fn oracles_are_reproducible_and_consistent() {
    let e = entry("coarse-staggered").unwrap();
    let a = oracle_truth(&e.dgp, 20_000, 4).unwrap();
    let b = oracle_truth(&e.dgp, 20_000, 4).unwrap();
    assert_eq!(a, b);
    for k in 0..=e.dgp.horizon {
        let diff = a.observed[k].mean - a.never_treated[k].mean;
        assert!((diff - a.observed_vs_never[k].mean).abs() < 1e-9);
    }
    // Before anyone can be treated, the arms coincide.
    assert!(a.observed_vs_never[0].mean.abs() < 1e-12);
    let m = expectation(&e.dgp, 10_000, 5, |_, natural| Some(natural.y[0]));
    assert!(m.se > 0.0 && m.mean.is_finite());
}

#[test]
fn violation_entry_breaks_parallel_trends() {
    let e = entry("violation").unwrap();
    assert!(e.dgp.violation.is_some_and(|c| c != 0.0));
    let clean = DgpConfig {
        violation: None,
        ..e.dgp.clone()
    };
    let with = oracle_truth(&e.dgp, 50_000, 6).unwrap();
    let without = oracle_truth(&clean, 50_000, 6).unwrap();
    let kk = e.dgp.horizon;
    // Untreated means shift only for subjects who would have been treated.
    assert!((with.never_treated[kk].mean - without.never_treated[kk].mean).abs() > 1e-3);
}

#[test]
fn misspecification_names_parse() {
    for (s, m) in [
        ("treatment-wrong", Misspecification::TreatmentWrong),
        ("trend-wrong", Misspecification::TrendWrong),
        ("both-wrong", Misspecification::BothWrong),
    ] {
        assert_eq!(s.parse::<Misspecification>().unwrap(), m);
    }
    assert!("neither".parse::<Misspecification>().is_err());
}
