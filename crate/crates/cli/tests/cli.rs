use std::path::Path;
use std::process::{Command, Output};

fn arhmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arhmm")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn help_lists_flags_and_unknown_flags_fail() {
    let o = arhmm(&["fit", "--help"]);
    assert_eq!(code(&o), 0);
    let help = stdout(&o);
    for flag in ["--spec", "--lambda", "--path", "--criterion", "--starts", "--seed", "--out"] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    assert_eq!(code(&arhmm(&["simulate", "--degree", "1", "--bogus"])), 1);
    assert_eq!(code(&arhmm(&[])), 1);
}

#[test]
fn simulate_is_reproducible_and_validates_degree() {
    let dir = tempfile::tempdir().unwrap();
    let run = |s: &str, z: &str| {
        arhmm(&["simulate", "--degree", "2", "--T", "300", "--seed", "4", "--out", &p(dir.path(), s), &p(dir.path(), z)])
    };
    assert_eq!(code(&run("a.csv", "az.csv")), 0);
    assert_eq!(code(&run("b.csv", "bz.csv")), 0);
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("az.csv"), read("bz.csv"));
    assert_eq!(std::fs::read_to_string(dir.path().join("a.csv")).unwrap().lines().count(), 301);

    let o = arhmm(&["simulate", "--degree", "4", "--out", &p(dir.path(), "c.csv"), &p(dir.path(), "cz.csv")]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn prep_extracts_and_downsamples() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("id,x,y\n");
    for i in 0..31 {
        let a = i as f64 * 0.1;
        csv.push_str(&format!("bird,{},{}\n", 10.0 * a.cos(), 10.0 * a.sin()));
    }
    std::fs::write(dir.path().join("tracks.csv"), csv).unwrap();
    let o = arhmm(&["prep", &p(dir.path(), "tracks.csv"), "--downsample", "1", "--out", &p(dir.path(), "s.csv")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(s.lines().count(), 30);
    assert!(s.starts_with("id,t,step,turn\n"));

    let o = arhmm(&["prep", &p(dir.path(), "tracks.csv"), "--downsample", "10", "--out", &p(dir.path(), "s10.csv")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = std::fs::read_to_string(dir.path().join("s10.csv")).unwrap();
    assert_eq!(s.lines().count(), 3);

    let missing = p(dir.path(), "nope.csv");
    let o = arhmm(&["prep", &missing, "--out", &p(dir.path(), "x.csv")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.csv"));
    let o = arhmm(&["prep", &p(dir.path(), "tracks.csv"), "--downsample", "0", "--out", &p(dir.path(), "x.csv")]);
    assert_eq!(code(&o), 1);
}

#[test]
fn fit_decode_residuals_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (series, truth) = (p(dir.path(), "s.csv"), p(dir.path(), "z.csv"));
    assert_eq!(code(&arhmm(&["simulate", "--degree", "1", "--T", "800", "--seed", "2", "--out", &series, &truth])), 0);

    let report = p(dir.path(), "fit.json");
    let spec = r#"{"n_states":2,"p_step":[1,1],"p_turn":[1,1]}"#;
    let o = arhmm(&["fit", &series, "--spec", spec, "--lambda", "0", "--starts", "3", "--out", &report]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("loglik"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["fit"]["lambda"], 0.0);
    assert!(json["lasso"].is_null());

    let states = p(dir.path(), "decoded.csv");
    let o = arhmm(&["decode", &series, "--fit", &report, "--out", &states, "--truth", &truth]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let acc: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("overall accuracy "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc > 0.9, "{acc}");
    assert_eq!(std::fs::read_to_string(&states).unwrap().lines().count(), 801);

    let res = p(dir.path(), "res.csv");
    let o = arhmm(&["residuals", &series, "--fit", &report, "--out", &res]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("step: n 799") && out.contains("turn: n 799"), "{out}");
    let body = std::fs::read_to_string(&res).unwrap();
    assert!(body.starts_with("track_id,t,variable,value\n"));
    assert!(body.contains("sim,1,step,NA"));
}

#[test]
fn fit_path_selects_and_refits() {
    let dir = tempfile::tempdir().unwrap();
    let (series, truth) = (p(dir.path(), "s.csv"), p(dir.path(), "z.csv"));
    assert_eq!(code(&arhmm(&["simulate", "--degree", "1", "--T", "400", "--seed", "3", "--out", &series, &truth])), 0);
    let spec_file = p(dir.path(), "spec.json");
    std::fs::write(&spec_file, r#"{"n_states":2,"p_step":[2,2],"p_turn":[2,2]}"#).unwrap();
    let report = p(dir.path(), "fit.json");
    let o = arhmm(&["fit", &series, "--spec", &spec_file, "--path", "--criterion", "bic", "--starts", "1", "--out", &report]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["lasso"]["points"].as_array().unwrap().len(), 24);
    assert_eq!(json["lasso"]["criterion"], "bic");
    assert_eq!(json["fit"]["lambda"], 0.0);
    let kept = &json["lasso"]["selected_degrees"];
    let mut want: Vec<u64> = kept["p_step"].as_array().unwrap().iter().chain(kept["p_turn"].as_array().unwrap()).map(|v| v.as_u64().unwrap()).collect();
    let got_spec = &json["fit"]["spec"];
    let mut got: Vec<u64> = got_spec["p_step"].as_array().unwrap().iter().chain(got_spec["p_turn"].as_array().unwrap()).map(|v| v.as_u64().unwrap()).collect();
    want.sort();
    got.sort();
    assert_eq!(got, want);

    // Either a fixed penalty or the path is required, not both.
    let o = arhmm(&["fit", &series, "--spec", &spec_file, "--path", "--lambda", "1", "--out", &report]);
    assert_eq!(code(&o), 1);
    let o = arhmm(&["fit", &series, "--spec", &spec_file, "--path", "--criterion", "accuracy", "--starts", "1", "--out", &report]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn fit_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (series, truth) = (p(dir.path(), "s.csv"), p(dir.path(), "z.csv"));
    assert_eq!(code(&arhmm(&["simulate", "--degree", "0", "--T", "6", "--out", &series, &truth])), 0);
    let out = p(dir.path(), "fit.json");
    let deep = r#"{"n_states":2,"p_step":[8,8],"p_turn":[0,0]}"#;
    let o = arhmm(&["fit", &series, "--spec", deep, "--lambda", "0", "--out", &out]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("observations"), "{}", stderr(&o));
    let o = arhmm(&["fit", &series, "--spec", "{not json", "--lambda", "0", "--out", &out]);
    assert_eq!(code(&o), 2);
    let o = arhmm(&["fit", &series, "--spec", r#"{"n_states":2,"p_step":[0,0],"p_turn":[0,0]}"#, "--lambda", "-1", "--out", &out]);
    assert_ne!(code(&o), 0);
}

#[test]
fn decode_rejects_mismatched_fit() {
    let dir = tempfile::tempdir().unwrap();
    let (series, truth) = (p(dir.path(), "s.csv"), p(dir.path(), "z.csv"));
    assert_eq!(code(&arhmm(&["simulate", "--degree", "0", "--T", "200", "--out", &series, &truth])), 0);
    let report = p(dir.path(), "fit.json");
    let spec = r#"{"n_states":2,"p_step":[0,0],"p_turn":[0,0]}"#;
    assert_eq!(code(&arhmm(&["fit", &series, "--spec", spec, "--lambda", "0", "--starts", "2", "--out", &report])), 0);
    // Three-state spec with two-state parameters.
    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    json["fit"]["spec"] = serde_json::json!({"n_states":3,"p_step":[0,0,0],"p_turn":[0,0,0]});
    std::fs::write(&report, json.to_string()).unwrap();
    let o = arhmm(&["decode", &series, "--fit", &report, "--out", &p(dir.path(), "d.csv")]);
    assert_ne!(code(&o), 0);
    let o = arhmm(&["residuals", &series, "--fit", &report, "--out", &p(dir.path(), "r.csv")]);
    assert_ne!(code(&o), 0);
}

#[test]
fn study_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("study");
    let o = arhmm(&[
        "study", "--scenario", "table1", "--replicates", "1", "--seed", "3", "--T", "300", "--starts", "1",
        "--stability-runs", "2", "--out", &out.to_string_lossy(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.json", "accuracy.csv", "accuracy_table.csv", "stability.csv", "consistency.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let table = std::fs::read_to_string(out.join("accuracy_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.lines().skip(1).all(|l| l.split(',').count() == 5));

    let file = dir.path().join("plain");
    std::fs::write(&file, "x").unwrap();
    let o = arhmm(&["study", "--replicates", "1", "--out", &file.join("sub").to_string_lossy()]);
    assert_eq!(code(&o), 2);
}
