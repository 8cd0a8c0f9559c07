//! Subcommand implementations. Each reads a validated [`RunConfig`] and
//! writes JSON results, plot-ready CSVs and a manifest into the output
//! directory.

use serde::Serialize;
use snmm::acceptance::{self, CriterionReport, Scale, Status};
use snmm::blip::{BlipModel, Flavor};
use snmm::derived::{self, Context, DerivedValue, Query};
use snmm::gestimation::{self, bootstrap, BootstrapResult, FitOptions, GEstimate};
use snmm::nuisance::NuisanceSpec;
use snmm::panel::{load_csv, PanelDataset};
use snmm::regime::{self, RegimeRule, RegimeValue};
use snmm::sensitivity::{sensitivity_grid, write_curve_csv, SensitivityProblem};
use snmm::simulation::{entry, gallery, simulate_panel};

use crate::config::{DgpSource, RunConfig, Subcommand};
use crate::error::CliError;
use crate::output::OutDir;

/// Runs the subcommand named in `cfg`.
pub fn execute(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    match cfg.subcommand {
        Subcommand::Simulate => cmd_simulate(cfg),
        Subcommand::Fit => cmd_fit(cfg),
        Subcommand::Derive => cmd_derive(cfg),
        Subcommand::Sensitivity => cmd_sensitivity(cfg),
        Subcommand::Optimal => cmd_optimal(cfg),
        Subcommand::Verify => cmd_verify(cfg),
    }
}

/// Data, model and nuisance spec resolved against each other.
struct Inputs {
    data: PanelDataset,
    model: BlipModel,
    spec: NuisanceSpec,
    opts: FitOptions,
}

fn inputs(cfg: &RunConfig) -> Result<Inputs, CliError> {
    let path = cfg.data.as_ref().expect("validated");
    let data = load_csv(path, cfg.schema.as_ref()).map_err(CliError::from_data)?;
    let model = cfg
        .model
        .as_ref()
        .expect("validated")
        .build(&data, None)
        .map_err(|e| CliError::from_spec("/model", e))?;
    let spec = cfg.nuisance.clone().unwrap_or_default();
    let mut opts = FitOptions::method(cfg.method);
    opts.ridge = cfg.ridge;
    Ok(Inputs {
        data,
        model,
        spec,
        opts,
    })
}

fn require_flavor(model: &BlipModel, allowed: &[Flavor], command: &str) -> Result<(), CliError> {
    if allowed.contains(&model.flavor) {
        Ok(())
    } else {
        Err(CliError::config_at(
            "/model/flavor",
            format!("`{command}` does not accept {:?} models", model.flavor),
        ))
    }
}

fn record_seeds(out: &mut OutDir, cfg: &RunConfig, spec: &NuisanceSpec) {
    out.seed("folds", spec.seed);
    if cfg.bootstrap > 0 {
        out.seed("bootstrap", cfg.seed);
    }
}

// ---------------------------------------------------------------------------
// simulate

fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let sim = cfg.simulate.as_ref().expect("validated");
    let mut out = OutDir::create(&cfg.out)?;
    let dgp = match &sim.dgp {
        DgpSource::Gallery { name } => {
            let e = entry(name).ok_or_else(|| {
                let names: Vec<String> = gallery().into_iter().map(|e| e.dgp.name).collect();
                CliError::config_at(
                    "/simulate/dgp/name",
                    format!("unknown gallery entry `{name}` (available: {})", names.join(", ")),
                )
            })?;
            out.json("model.json", &e.model)?;
            out.json("nuisance.json", &e.nuisance)?;
            out.json("truth.json", &serde_json::json!({ "psi": e.psi, "dgp": e.dgp }))?;
            e.dgp
        }
        DgpSource::Custom { config } => {
            config.validate().map_err(|e| CliError::from_spec("/simulate/dgp/config", e))?;
            out.json("dgp.json", config)?;
            (**config).clone()
        }
    };
    let data = simulate_panel(&dgp, sim.n, cfg.seed)?;
    out.with_writer("panel.csv", |w| data.write_csv(w))?;
    out.seed("simulation", cfg.seed);
    println!(
        "simulated {} subjects over {} periods from `{}` (seed {})",
        data.n_subjects(),
        data.n_times(),
        dgp.name,
        cfg.seed
    );
    out.finish(cfg)
}

// ---------------------------------------------------------------------------
// fit

#[derive(Serialize)]
struct BootstrapSummary {
    se: Vec<f64>,
    percentile_ci: Vec<[f64; 2]>,
    normal_ci: Vec<[f64; 2]>,
    seed: u64,
    requested: usize,
    failures: usize,
    taxonomy: std::collections::BTreeMap<String, usize>,
}

impl BootstrapSummary {
    fn of(b: &BootstrapResult, range: std::ops::Range<usize>) -> Self {
        BootstrapSummary {
            se: b.se[range.clone()].to_vec(),
            percentile_ci: b.percentile_ci[range.clone()].to_vec(),
            normal_ci: b.normal_ci[range].to_vec(),
            seed: b.seed,
            requested: b.requested,
            failures: b.failures,
            taxonomy: b.taxonomy.clone(),
        }
    }
}

#[derive(Serialize)]
struct FitReport<'a> {
    estimate: &'a GEstimate,
    bootstrap: Option<BootstrapSummary>,
    effects_by_time: &'a [DerivedValue],
    effects_by_lag: &'a [DerivedValue],
}

/// Effect of the observed treatments against never treating at each time,
/// and for coarse models the average effect at each lag after initiation.
fn effect_queries(ctx: &Context<'_>) -> (Vec<Query>, Vec<Query>) {
    let kk = ctx.data.horizon();
    let by_time = (0..=kk).map(|k| Query::ObservedVsNever { k }).collect();
    let by_lag = if ctx.model.flavor == Flavor::Coarse {
        (0..=kk)
            .map(|lag| Query::LagAverage { lag })
            .filter(|q| derived::evaluate(ctx, q, false).is_ok())
            .collect()
    } else {
        Vec::new()
    };
    (by_time, by_lag)
}

fn cmd_fit(cfg: &RunConfig) -> Result<(), CliError> {
    let inp = inputs(cfg)?;
    require_flavor(
        &inp.model,
        &[Flavor::Coarse, Flavor::Standard, Flavor::Multiplicative],
        "fit",
    )?;
    let mut out = OutDir::create(&cfg.out)?;
    record_seeds(&mut out, cfg, &inp.spec);
    let fit = gestimation::fit(&inp.data, &inp.model, &inp.spec, &inp.opts)?;
    let ctx = Context {
        data: &inp.data,
        model: &inp.model,
        fit: &fit,
        spec: &inp.spec,
        opts: &inp.opts,
    };
    let (q_time, q_lag) = effect_queries(&ctx);
    let queries: Vec<Query> = q_time.iter().chain(&q_lag).cloned().collect();
    let mut values = derived::evaluate_all(&ctx, &queries)?;
    let mut summary = None;
    if cfg.bootstrap > 0 {
        let d = fit.dim();
        let est: Vec<f64> = fit
            .psi_hat
            .iter()
            .copied()
            .chain(values.iter().map(|v| v.estimate))
            .collect();
        let boot = bootstrap(inp.data.n_subjects(), &est, cfg.bootstrap, cfg.seed, |idx, _| {
            let data = inp.data.select_subjects(idx)?;
            let f = gestimation::fit(&data, &inp.model, &inp.spec, &inp.opts)?;
            let c = Context {
                data: &data,
                fit: &f,
                ..ctx
            };
            let mut row = f.psi_hat.clone();
            for q in &queries {
                row.push(derived::evaluate(&c, q, false)?.estimate);
            }
            Ok(row)
        })?;
        for (t, v) in values.iter_mut().enumerate() {
            v.se = Some(boot.se[d + t]);
            v.ci = Some(boot.percentile_ci[d + t]);
            v.ci_method = Some(format!(
                "bootstrap percentile ({} of {} replicates, seed {})",
                boot.replicates.len(),
                boot.requested,
                cfg.seed
            ));
        }
        summary = Some(BootstrapSummary::of(&boot, 0..d));
    }
    let (by_time, by_lag) = values.split_at(q_time.len());

    out.with_writer("psi.csv", |w| write_psi_csv(w, &fit, summary.as_ref()))?;
    let labels = inp.data.time_labels();
    let rows: Vec<(f64, &DerivedValue)> = by_time.iter().enumerate().map(|(k, v)| (labels[k] as f64, v)).collect();
    out.with_writer("effect_by_time.csv", |w| derived::write_plot_csv(w, "time", &rows))?;
    if !by_lag.is_empty() {
        let rows: Vec<(f64, &DerivedValue)> = by_lag
            .iter()
            .map(|v| match v.query {
                Query::LagAverage { lag } => (lag as f64, v),
                _ => unreachable!("lag queries only"),
            })
            .collect();
        out.with_writer("effect_by_lag.csv", |w| derived::write_plot_csv(w, "lag", &rows))?;
    }
    out.json(
        "fit.json",
        &FitReport {
            estimate: &fit,
            bootstrap: summary,
            effects_by_time: by_time,
            effects_by_lag: by_lag,
        },
    )?;
    print_psi(&fit);
    out.finish(cfg)
}

fn write_psi_csv<W: std::io::Write>(w: W, fit: &GEstimate, boot: Option<&BootstrapSummary>) -> snmm::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["parameter", "estimate", "se", "lo", "hi", "boot_se", "boot_lo", "boot_hi"])?;
    for t in 0..fit.dim() {
        let (bse, blo, bhi) = boot.map_or((String::new(), String::new(), String::new()), |b| {
            (
                b.se[t].to_string(),
                b.percentile_ci[t][0].to_string(),
                b.percentile_ci[t][1].to_string(),
            )
        });
        wr.write_record([
            fit.names[t].clone(),
            fit.psi_hat[t].to_string(),
            fit.se[t].to_string(),
            fit.ci[t][0].to_string(),
            fit.ci[t][1].to_string(),
            bse,
            blo,
            bhi,
        ])?;
    }
    wr.flush()?;
    Ok(())
}

fn print_psi(fit: &GEstimate) {
    for t in 0..fit.dim() {
        println!(
            "{:<24} {:>12.6} (se {:.6}, 95% CI [{:.6}, {:.6}])",
            fit.names[t], fit.psi_hat[t], fit.se[t], fit.ci[t][0], fit.ci[t][1]
        );
    }
}

// ---------------------------------------------------------------------------
// derive

fn write_derived_csv<W: std::io::Write>(w: W, values: &[DerivedValue]) -> snmm::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["quantity", "estimate", "se", "lo", "hi", "n", "ci_method"])?;
    for v in values {
        let opt = |x: Option<f64>| x.map_or(String::new(), |x| x.to_string());
        wr.write_record([
            v.label.clone(),
            v.estimate.to_string(),
            opt(v.se),
            opt(v.ci.map(|c| c[0])),
            opt(v.ci.map(|c| c[1])),
            v.n.to_string(),
            v.ci_method.clone().unwrap_or_default(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

fn cmd_derive(cfg: &RunConfig) -> Result<(), CliError> {
    let inp = inputs(cfg)?;
    let mut out = OutDir::create(&cfg.out)?;
    record_seeds(&mut out, cfg, &inp.spec);
    let (fit, values) = if cfg.bootstrap > 0 {
        derived::pipeline_bootstrap(
            &inp.data,
            &inp.model,
            &inp.spec,
            &inp.opts,
            &cfg.queries,
            cfg.bootstrap,
            cfg.seed,
        )?
    } else {
        let fit = gestimation::fit(&inp.data, &inp.model, &inp.spec, &inp.opts)?;
        let ctx = Context {
            data: &inp.data,
            model: &inp.model,
            fit: &fit,
            spec: &inp.spec,
            opts: &inp.opts,
        };
        let values = derived::evaluate_all(&ctx, &cfg.queries).map_err(|e| CliError::from_spec("/queries", e))?;
        (fit, values)
    };
    out.with_writer("derived.csv", |w| write_derived_csv(w, &values))?;
    out.json("derived.json", &serde_json::json!({ "estimate": fit, "derived": values }))?;
    for v in &values {
        let ci = v.ci.map_or(String::new(), |c| format!(", 95% CI [{:.6}, {:.6}]", c[0], c[1]));
        println!("{:<40} {:>12.6}{ci}", v.label, v.estimate);
        for w in &v.warnings {
            eprintln!("warning: {}: {w}", v.label);
        }
    }
    out.finish(cfg)
}

// ---------------------------------------------------------------------------
// sensitivity

fn cmd_sensitivity(cfg: &RunConfig) -> Result<(), CliError> {
    let inp = inputs(cfg)?;
    require_flavor(&inp.model, &[Flavor::Coarse], "sensitivity")?;
    let sens = cfg.sensitivity.as_ref().expect("validated");
    let mut out = OutDir::create(&cfg.out)?;
    out.seed("folds", inp.spec.seed);
    sens.family
        .at(0.0, &inp.data)
        .map_err(|e| CliError::from_spec("/sensitivity/family", e))?;
    let problem = SensitivityProblem {
        data: &inp.data,
        model: &inp.model,
        spec: &inp.spec,
        opts: &inp.opts,
        family: sens.family.clone().into(),
        targets: sens.targets.clone(),
    };
    let curve = sensitivity_grid(&problem, &sens.grid)?;
    out.with_writer("sensitivity.csv", |w| write_curve_csv(w, &curve))?;
    out.json("sensitivity.json", &curve)?;
    for p in &curve.points {
        if let Some(e) = &p.error {
            eprintln!("warning: c0 = {}: {e}", p.c0);
        }
    }
    for b in &curve.breakdown {
        let fmt = |x: Option<f64>| x.map_or("none on grid".to_string(), |v| format!("{v:.6}")) ;
        println!(
            "{:<32} breakdown c0 > 0: {}, c0 < 0: {}{}",
            b.label,
            fmt(b.positive),
            fmt(b.negative),
            if b.covers_at_zero { " (interval covers 0 without adjustment)" } else { "" }
        );
    }
    out.finish(cfg)
}

// ---------------------------------------------------------------------------
// optimal

#[derive(Serialize)]
struct OptimalReport<'a> {
    estimate: &'a GEstimate,
    tau: &'a [f64],
    actions: &'a [Vec<f64>],
    value: &'a RegimeValue,
    assumptions: &'a str,
}

fn write_rule_csv<W: std::io::Write>(w: W, rule: &RegimeRule) -> snmm::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["time".to_string(), "action".into(), "count".into(), "example_subject".into()];
    header.extend(rule.actions.iter().map(|a| format!("score{a:?}")));
    wr.write_record(&header)?;
    for r in &rule.rows {
        let mut rec = vec![
            r.time.to_string(),
            format!("{:?}", r.action),
            r.count.to_string(),
            r.example_subject.clone(),
        ];
        rec.extend(r.scores.iter().map(|s| s.to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

fn cmd_optimal(cfg: &RunConfig) -> Result<(), CliError> {
    let inp = inputs(cfg)?;
    require_flavor(&inp.model, &[Flavor::Regime], "optimal")?;
    let mut out = OutDir::create(&cfg.out)?;
    record_seeds(&mut out, cfg, &inp.spec);
    let fit = regime::fit_optimal_regime(&inp.data, &inp.model, &inp.spec, &inp.opts)?;
    let value = if cfg.bootstrap > 0 {
        regime::regime_value_bootstrap(&inp.data, &inp.model, &inp.spec, &inp.opts, cfg.bootstrap, cfg.seed)?.0
    } else {
        regime::regime_value(&inp.data, &inp.model, &fit.estimate)?
    };
    let rule = RegimeRule::from_fit(&inp.model, &fit.estimate.psi_hat, &inp.data)?;
    out.json("rule.json", &rule)?;
    out.with_writer("rule.csv", |w| write_rule_csv(w, &rule))?;
    out.json(
        "optimal.json",
        &OptimalReport {
            estimate: &fit.estimate,
            tau: &fit.tau,
            actions: &fit.actions,
            value: &value,
            assumptions: &fit.assumptions,
        },
    )?;
    print_psi(&fit.estimate);
    let ci = value.ci.map_or(String::new(), |c| format!(", 95% CI [{:.6}, {:.6}]", c[0], c[1]));
    println!("value of the estimated rule {:.6}{ci} (observed {:.6})", value.estimate, value.observed);
    println!("{}", fit.assumptions);
    out.finish(cfg)
}

// ---------------------------------------------------------------------------
// verify

fn cmd_verify(cfg: &RunConfig) -> Result<(), CliError> {
    let v = cfg.verify.as_ref().expect("validated");
    let n = acceptance::TITLES.len();
    if let Some(bad) = v.criteria.iter().find(|c| **c == 0 || **c > n) {
        return Err(CliError::config_at("/verify/criteria", format!("no criterion {bad} (1..={n})")));
    }
    let ids: Vec<usize> = if v.criteria.is_empty() {
        (1..=n).collect()
    } else {
        v.criteria.clone()
    };
    let scale = if v.quick { Scale::Quick } else { Scale::Full };
    let mut out = OutDir::create(&cfg.out)?;
    let mut reports: Vec<CriterionReport> = Vec::new();
    for id in ids {
        let r = acceptance::run(id, scale);
        println!("{r}");
        reports.push(r);
    }
    // Timings vary between runs; the report keeps only verdicts and details.
    let stable: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "id": r.id,
                "title": r.title,
                "status": r.status,
                "details": r.details,
            })
        })
        .collect();
    out.json("verify.json", &serde_json::json!({ "scale": scale, "criteria": stable }))?;
    out.finish(cfg)?;
    let failed: Vec<usize> = reports.iter().filter(|r| r.status == Status::Fail).map(|r| r.id).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::acceptance(format!("acceptance failed for criteria {failed:?}")))
    }
}
