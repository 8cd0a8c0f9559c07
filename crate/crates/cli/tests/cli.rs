//! End-to-end runs of the `snmm` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use snmm::gestimation::{fit, FitOptions};
use snmm::panel::load_csv;
use snmm::simulation::entry;

fn snmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snmm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulates a coarse staggered panel and returns its directory.
fn simulated(root: &Path, name: &str, n: &str) -> PathBuf {
    let out = root.join(name);
    let o = snmm(&["simulate", "--dgp", name, "--n", n, "--seed", "5", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn fit_args<'a>(sim: &'a Path, out: &'a Path) -> Vec<String> {
    vec![
        "--data".into(),
        s(&sim.join("panel.csv")).into(),
        "--model".into(),
        s(&sim.join("model.json")).into(),
        "--nuisance".into(),
        s(&sim.join("nuisance.json")).into(),
        "--out".into(),
        s(out).into(),
    ]
}

fn run_with(cmd: &str, base: Vec<String>, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![cmd.into()];
    args.extend(base);
    args.extend(extra.iter().map(|x| x.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    snmm(&refs)
}

fn read_psi(path: &Path) -> Vec<(String, f64)> {
    let mut rd = csv::Reader::from_path(path).unwrap();
    rd.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn fit_matches_direct_library_call() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path(), "coarse-staggered", "2000");
    let out = dir.path().join("fit");
    let o = run_with("fit", fit_args(&sim, &out), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["psi.csv", "effect_by_time.csv", "effect_by_lag.csv", "fit.json", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let e = entry("coarse-staggered").unwrap();
    let data = load_csv(sim.join("panel.csv"), None).unwrap();
    let model = e.model.build(&data, None).unwrap();
    let direct = fit(&data, &model, &e.nuisance, &FitOptions::default()).unwrap();
    let cli = read_psi(&out.join("psi.csv"));
    assert_eq!(cli.len(), direct.dim());
    for (t, (name, v)) in cli.iter().enumerate() {
        assert_eq!(name, &direct.names[t]);
        assert_eq!(*v, direct.psi_hat[t], "{name}");
    }
    let lag = fs::read_to_string(out.join("effect_by_lag.csv")).unwrap();
    assert!(lag.starts_with("lag,estimate,lo,hi"));
}

#[test]
fn manifest_rerun_is_bitwise_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path(), "coarse-staggered", "1000");
    let first = dir.path().join("first");
    let o = run_with("fit", fit_args(&sim, &first), &["--bootstrap", "100", "--seed", "3", "--threads", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let second = dir.path().join("second");
    let manifest = first.join("manifest.json");
    let o = snmm(&["--threads", "1", "--config", s(&manifest), "--out", s(&second)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["psi.csv", "effect_by_time.csv", "effect_by_lag.csv", "fit.json"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["seeds"]["bootstrap"], 3);
    assert_eq!(m["config"]["bootstrap"], 100);
}

#[test]
fn simulate_rerun_reproduces_panel() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path(), "null", "300");
    let again = dir.path().join("again");
    let o = snmm(&["--config", s(&sim.join("manifest.json")), "--out", s(&again)]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(sim.join("panel.csv")).unwrap(),
        fs::read(again.join("panel.csv")).unwrap()
    );
}

#[test]
fn derive_sensitivity_and_optimal_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path(), "coarse-staggered", "1500");
    let queries = dir.path().join("queries.json");
    fs::write(
        &queries,
        r#"[{"type": "mean_never_treated", "k": 3}, {"type": "conditional_mean", "m": 1, "k": 3}]"#,
    )
    .unwrap();
    let out = dir.path().join("derive");
    let o = run_with("derive", fit_args(&sim, &out), &["--queries", s(&queries), "--bootstrap", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("derived.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let out = dir.path().join("sens");
    let o = run_with("sensitivity", fit_args(&sim, &out), &["--grid=-0.5:0.5:0.25"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let curve: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("sensitivity.json")).unwrap()).unwrap();
    assert_eq!(curve["points"].as_array().unwrap().len(), 5);

    let reg = simulated(dir.path(), "regime", "1500");
    let out = dir.path().join("optimal");
    let o = run_with("optimal", fit_args(&reg, &out), &["--bootstrap", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rule: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("rule.json")).unwrap()).unwrap();
    assert!(!rule["rows"].as_array().unwrap().is_empty());
    assert!(String::from_utf8_lossy(&o.stdout).contains("parallel trends"));
}

#[test]
fn exit_codes_follow_the_taxonomy() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path(), "coarse-staggered", "500");
    let out = dir.path().join("x");

    // Config: malformed model, with a JSON pointer in the message.
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"flavor": "coarse", "basis": {"type": "per_pair"}, "extra": 1, "d": "x"}"#).unwrap();
    let mut args = fit_args(&sim, &out);
    args[3] = s(&bad).into();
    let o = run_with("fit", args, &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/model/d"));
    assert_eq!(code(&run_with("fit", fit_args(&sim, &out), &["--method", "newton"])), 2);
    assert_eq!(code(&run_with("sensitivity", fit_args(&sim, &out), &["--grid", "x"])), 2);

    // Data: missing file and a missing cell.
    let mut args = fit_args(&sim, &out);
    args[1] = s(&dir.path().join("absent.csv")).into();
    assert_eq!(code(&run_with("fit", args, &[])), 3);
    let holes = dir.path().join("holes.csv");
    fs::write(&holes, "subject_id,time,y,a_a,z_l\n1,0,1.0,0,0\n1,1,,0,0\n").unwrap();
    let mut args = fit_args(&sim, &out);
    args[1] = s(&holes).into();
    assert_eq!(code(&run_with("fit", args, &[])), 3);

    // Estimation: nobody is ever treated, so nothing is identified.
    let panel = fs::read_to_string(sim.join("panel.csv")).unwrap();
    let mut lines = panel.lines();
    let header = lines.next().unwrap();
    let a = header.split(',').position(|c| c == "a_a").unwrap();
    let mut untreated = format!("{header}\n");
    for l in lines {
        let mut f: Vec<&str> = l.split(',').collect();
        f[a] = "0";
        untreated.push_str(&f.join(","));
        untreated.push('\n');
    }
    let p = dir.path().join("untreated.csv");
    fs::write(&p, untreated).unwrap();
    let mut args = fit_args(&sim, &out);
    args[1] = s(&p).into();
    assert_eq!(code(&run_with("fit", args, &[])), 4);
}

#[test]
fn verify_runs_selected_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("verify");
    let o = snmm(&["verify", "--quick", "--criteria", "4", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("criterion  4 PASS"));
    assert!(out.join("verify.json").exists());
    assert_eq!(code(&snmm(&["verify", "--criteria", "0", "--out", s(&out)])), 2);
}
