//! Derived counterfactual quantities against oracles, plus their input
//! validation.

use std::collections::BTreeMap;

use snmm::blip::BlipModel;
use snmm::derived::{
    evaluate, pipeline_bootstrap, write_plot_csv, Cohort, Comparator, Context, Predicate, Query,
};
use snmm::gestimation::{fit, FitOptions, GEstimate};
use snmm::nuisance::NuisanceSpec;
use snmm::panel::PanelDataset;
use snmm::simulation::{entry, oracle_truth, simulate_panel};
use snmm::Error;

struct Fitted {
    data: PanelDataset,
    model: BlipModel,
    spec: NuisanceSpec,
    opts: FitOptions,
    fit: GEstimate,
}

impl Fitted {
    fn new(name: &str, n: usize, seed: u64) -> Self {
        let e = entry(name).unwrap();
        let data = simulate_panel(&e.dgp, n, seed).unwrap();
        let model = e.model.build(&data, None).unwrap();
        let opts = FitOptions::default();
        let fit = fit(&data, &model, &e.nuisance, &opts).unwrap();
        Fitted {
            data,
            model,
            spec: e.nuisance,
            opts,
            fit,
        }
    }

    fn ctx(&self) -> Context<'_> {
        Context {
            data: &self.data,
            model: &self.model,
            fit: &self.fit,
            spec: &self.spec,
            opts: &self.opts,
        }
    }
}

fn pred(column: &str, comparator: Comparator, threshold: f64, time: usize) -> Predicate {
    Predicate {
        column: column.into(),
        comparator,
        threshold,
        time,
    }
}

#[test]
fn coarse_means_match_counterfactual_oracle() {
    let f = Fitted::new("coarse-staggered", 20_000, 21);
    let e = entry("coarse-staggered").unwrap();
    let truth = oracle_truth(&e.dgp, 400_000, 9).unwrap();
    let kk = f.data.horizon();
    for k in 0..=kk {
        let v = evaluate(&f.ctx(), &Query::MeanNeverTreated { k }, true).unwrap();
        let t = &truth.never_treated[k];
        let se = (v.se.unwrap().powi(2) + t.se.powi(2)).sqrt();
        assert!((v.estimate - t.mean).abs() < 4.0 * se, "k={k}: {} vs {}", v.estimate, t.mean);
    }
    let q = Query::ConditionalMean {
        m: 1,
        k: kk,
        predicates: vec![],
        cohort: None,
    };
    let v = evaluate(&f.ctx(), &q, true).unwrap();
    let t = &truth.cohort_never[&format!("1,{kk}")];
    let se = (v.se.unwrap().powi(2) + t.se.powi(2)).sqrt();
    assert!((v.estimate - t.mean).abs() < 4.0 * se, "{} vs {}", v.estimate, t.mean);
    let obs = evaluate(&f.ctx(), &Query::ObservedVsNever { k: kk }, true).unwrap();
    let t = &truth.observed_vs_never[kk];
    let se = (obs.se.unwrap().powi(2) + t.se.powi(2)).sqrt();
    assert!((obs.estimate - t.mean).abs() < 4.0 * se);
}

#[test]
fn predicates_must_lie_in_the_history() {
    let f = Fitted::new("coarse-staggered", 1_000, 1);
    let ctx = f.ctx();
    let cm = |p: Predicate| Query::ConditionalMean {
        m: 1,
        k: 2,
        predicates: vec![p],
        cohort: Some(Cohort::AtRisk),
    };
    // Covariates up to m are history, treatment and outcome only before m.
    assert!(evaluate(&ctx, &cm(pred("l", Comparator::Eq, 1.0, 1)), false).is_ok());
    assert!(evaluate(&ctx, &cm(pred("y", Comparator::Gt, 0.0, 0)), false).is_ok());
    for p in [
        pred("l", Comparator::Eq, 1.0, 2),
        pred("a", Comparator::Eq, 1.0, 1),
        pred("y", Comparator::Gt, 0.0, 1),
        pred("nope", Comparator::Eq, 1.0, 0),
    ] {
        let label = p.to_string();
        assert!(
            matches!(evaluate(&ctx, &cm(p), false), Err(Error::Config(_))),
            "{label} should be rejected"
        );
    }
    let empty = cm(pred("l", Comparator::Gt, 100.0, 0));
    assert!(matches!(evaluate(&ctx, &empty, false), Err(Error::Empty(_))));
}

#[test]
fn predicate_subgroups_restrict_the_average() {
    let f = Fitted::new("coarse-staggered", 2_000, 2);
    let ctx = f.ctx();
    let q = |c: Comparator| Query::ConditionalMean {
        m: 1,
        k: 3,
        predicates: vec![pred("l", c, 1.0, 1)],
        cohort: Some(Cohort::AtRisk),
    };
    let all = evaluate(
        &ctx,
        &Query::ConditionalMean {
            m: 1,
            k: 3,
            predicates: vec![],
            cohort: Some(Cohort::AtRisk),
        },
        false,
    )
    .unwrap();
    let one = evaluate(&ctx, &q(Comparator::Eq), false).unwrap();
    let other = evaluate(&ctx, &q(Comparator::Ne), false).unwrap();
    assert_eq!(one.n + other.n, all.n);
    let pooled = (one.estimate * one.n as f64 + other.estimate * other.n as f64) / all.n as f64;
    assert!((pooled - all.estimate).abs() < 1e-10);
}

#[test]
fn coarse_models_reject_the_whole_population_cohort() {
    let f = Fitted::new("coarse-staggered", 800, 3);
    let q = Query::ConditionalMean {
        m: 1,
        k: 2,
        predicates: vec![],
        cohort: Some(Cohort::All),
    };
    assert!(matches!(evaluate(&f.ctx(), &q, false), Err(Error::Config(_))));
    assert!(matches!(
        evaluate(&f.ctx(), &Query::MeanNeverTreated { k: 9 }, false),
        Err(Error::Config(_) | Error::Dimension(_))
    ));
}

#[test]
fn lag_average_is_coarse_only() {
    let f = Fitted::new("standard-general", 1_000, 4);
    assert!(evaluate(&f.ctx(), &Query::LagAverage { lag: 1 }, false).is_err());
    let c = Fitted::new("coarse-staggered", 1_000, 4);
    let v = evaluate(&c.ctx(), &Query::LagAverage { lag: 1 }, true).unwrap();
    assert!(v.estimate.is_finite() && v.se.unwrap() > 0.0);
}

#[test]
fn blip_flags_extrapolation() {
    let f = Fitted::new("coarse-staggered", 1_000, 5);
    let mut at = BTreeMap::new();
    at.insert("l".to_string(), 7.5);
    let q = Query::Blip {
        m: 1,
        k: 3,
        action: vec![2.0],
        predicates: vec![],
        cohort: None,
        at,
    };
    let v = evaluate(&f.ctx(), &q, true).unwrap();
    assert!(v.warnings.iter().any(|w| w.contains("l = 7.5")), "{:?}", v.warnings);
    assert!(v.warnings.iter().any(|w| w.contains("action component 0")), "{:?}", v.warnings);

    let q = Query::Blip {
        m: 1,
        k: 3,
        action: vec![1.0],
        predicates: vec![],
        cohort: None,
        at: BTreeMap::new(),
    };
    assert!(evaluate(&f.ctx(), &q, true).unwrap().warnings.is_empty());
}

#[test]
fn delta_and_bootstrap_standard_errors_agree() {
    let e = entry("coarse-staggered").unwrap();
    let data = simulate_panel(&e.dgp, 3_000, 6).unwrap();
    let model = e.model.build(&data, None).unwrap();
    let opts = FitOptions::default();
    let queries = vec![Query::MeanNeverTreated { k: 3 }, Query::LagAverage { lag: 2 }];
    let (g, boot) = pipeline_bootstrap(&data, &model, &e.nuisance, &opts, &queries, 200, 17).unwrap();
    let ctx = Context {
        data: &data,
        model: &model,
        fit: &g,
        spec: &e.nuisance,
        opts: &opts,
    };
    for (q, b) in queries.iter().zip(&boot) {
        let d = evaluate(&ctx, q, true).unwrap();
        assert_eq!(d.estimate, b.estimate);
        let ratio = d.se.unwrap() / b.se.unwrap();
        assert!((0.75..1.33).contains(&ratio), "{}: delta/bootstrap se ratio {ratio}", d.label);
        let ci = b.ci.unwrap();
        assert!(ci[0] < b.estimate && b.estimate < ci[1]);
        assert!(b.ci_method.as_deref().unwrap().starts_with("bootstrap"));
    }
}

#[test]
fn plot_csv_has_one_row_per_point() {
    let f = Fitted::new("coarse-staggered", 800, 7);
    let vals: Vec<_> = (0..=f.data.horizon())
        .map(|k| evaluate(&f.ctx(), &Query::ObservedVsNever { k }, true).unwrap())
        .collect();
    let rows: Vec<(f64, &_)> = vals.iter().enumerate().map(|(k, v)| (k as f64, v)).collect();
    let mut buf = Vec::new();
    write_plot_csv(&mut buf, "time", &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "time,estimate,lo,hi");
    assert_eq!(lines.len(), vals.len() + 1);
    let last: Vec<f64> = lines[lines.len() - 1].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(last[1], vals[vals.len() - 1].estimate);
    assert!(last[2] < last[1] && last[1] < last[3]);
}

#[test]
fn cde_validates_its_inputs() {
    let f = Fitted::new("cde", 2_000, 8);
    let names = f.data.treatment_names().to_vec();
    let q = |m, k, a: &str, r: &str| Query::Cde {
        m,
        k,
        a_component: a.into(),
        r_component: r.into(),
        r_covariates: vec![],
        r_nuisance: None,
    };
    let ok = evaluate(&f.ctx(), &q(0, 2, &names[0], &names[1]), true).unwrap();
    assert!(ok.estimate.is_finite() && ok.se.unwrap() > 0.0);
    assert!(matches!(
        evaluate(&f.ctx(), &q(1, 1, &names[0], &names[1]), false),
        Err(Error::Config(_))
    ));
    assert!(evaluate(&f.ctx(), &q(0, 2, &names[0], "missing"), false).is_err());

    let s = Fitted::new("standard-general", 500, 8);
    let sn = s.data.treatment_names()[0].clone();
    assert!(matches!(
        evaluate(&s.ctx(), &q(0, 2, &sn, &sn), false),
        Err(Error::Config(_))
    ));
}

#[test]
fn queries_round_trip_through_json() {
    let q = Query::Blip {
        m: 2,
        k: 4,
        action: vec![1.0],
        predicates: vec![pred("l", Comparator::Le, 0.5, 1)],
        cohort: Some(Cohort::AtRisk),
        at: BTreeMap::new(),
    };
    let text = serde_json::to_string(&q).unwrap();
    assert!(text.contains(r#""type":"blip""#));
    assert_eq!(serde_json::from_str::<Query>(&text).unwrap(), q);
    assert!(serde_json::from_str::<Query>(r#"{"type":"mean_never_treated","k":1,"bogus":2}"#).is_err());
}
