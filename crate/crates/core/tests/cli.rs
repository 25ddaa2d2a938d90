use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ets-impact")).args(args).current_dir(dir).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h = r.headers().unwrap().clone();
    assert_eq!(&h[0], "outcome");
    r.records().map(|x| x.unwrap()).collect()
}

fn num(r: &csv::StringRecord, i: usize) -> Option<f64> {
    r[i].parse().ok()
}

#[test]
fn null_panel_rejections_at_nominal_rate() {
    let tmp = TempDir::new().unwrap();
    ok(&bin(&["simulate", "--preset", "null", "--out", "null.csv"], tmp.path()));
    ok(&bin(&["att", "--input", "null.csv", "--out", "grid.csv"], tmp.path()));
    let grid = rows(&tmp.path().join("grid.csv"));
    let z: Vec<f64> = grid.iter().filter_map(|r| Some(num(r, 3)? / num(r, 4)?)).collect();
    assert!(z.len() >= 60, "{}", z.len());
    // each cell lands beyond 2 SE about 5% of the time under the null
    let beyond = z.iter().filter(|z| z.abs() > 2.0).count();
    assert!(beyond * 10 <= z.len(), "{beyond} of {}", z.len());
    assert!(z.iter().all(|z| z.abs() < 4.0), "{z:?}");
}

#[test]
fn phase2_emission_cut_recovered() {
    let tmp = TempDir::new().unwrap();
    ok(&bin(&["simulate", "--preset", "table3_phase2", "--out", "p.csv"], tmp.path()));
    ok(&bin(&["att", "--input", "p.csv", "--outcomes", "co2", "--out", "grid.csv"], tmp.path()));
    let grid = rows(&tmp.path().join("grid.csv"));
    let phase2: Vec<f64> = grid.iter().filter(|r| &r[1] == "PhaseII").filter_map(|r| num(r, 3)).collect();
    assert!(!phase2.is_empty());
    for est in phase2 {
        assert!((-0.31..=-0.19).contains(&est), "{est}");
    }
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let args = ["run", "--preset", "null", "--n-firms", "600", "--seed", "5"];
    let mut a = args.to_vec();
    a.extend(["--out-dir", "a"]);
    let mut b = args.to_vec();
    b.extend(["--out-dir", "b", "--threads", "1"]);
    ok(&bin(&a, tmp.path()));
    ok(&bin(&b, tmp.path()));
    let mut names: Vec<_> = std::fs::read_dir(tmp.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n == "att_grid.csv"));
    for n in names {
        let x = std::fs::read(tmp.path().join("a").join(&n)).unwrap();
        let y = std::fs::read(tmp.path().join("b").join(&n)).unwrap();
        assert!(x == y, "{n:?} differs");
    }
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn bad_flag_value_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let out = bin(&["att", "--support", "sometimes", "--n-firms", "200"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["exit_code"], 2);
}

#[test]
fn missing_input_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let out = bin(&["describe", "--input", "nowhere.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_json(&out)["message"].is_string());
}

#[test]
fn failed_run_leaves_marker() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("bad.csv"), "firm_id,year,treated\na,2003,1\na,2003,1\n").unwrap();
    let out = bin(&["run", "--input", "bad.csv", "--out-dir", "rep"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    let marker = std::fs::read_to_string(tmp.path().join("rep/FAILED")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&marker).unwrap();
    assert_eq!(v["stage"], "ingest");
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("run.toml"), "preset = \"null\"\nn_firms = 400\nneighbours = [1]\n").unwrap();
    ok(&bin(&["att", "--config", "run.toml", "--neighbors", "2", "--out", "g.csv"], tmp.path()));
    let grid = rows(&tmp.path().join("g.csv"));
    let est: Vec<&str> = grid.iter().map(|r| r.get(2).unwrap()).collect();
    assert!(est.contains(&"NN(1:2)"), "{est:?}");
    assert!(!est.contains(&"NN(1:1)"), "{est:?}");
}

#[test]
fn unknown_config_key_rejected() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("run.toml"), "neighbors_typo = [1]\n").unwrap();
    let out = bin(&["att", "--config", "run.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

/// firm -> industry from a panel CSV.
fn industries(path: &Path) -> std::collections::HashMap<String, String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).map(|x| (x[0].to_string(), x[2].to_string())).collect()
}

#[test]
fn exact_on_industry_flag() {
    let tmp = TempDir::new().unwrap();
    ok(&bin(&["simulate", "--preset", "null", "--n-firms", "400", "--out", "p.csv"], tmp.path()));
    let base = ["match", "--input", "p.csv", "--neighbours", "2"];
    let mut within = base.to_vec();
    within.extend(["--exact-on", "industry", "--out", "w.csv"]);
    ok(&bin(&within, tmp.path()));

    let ind = industries(&tmp.path().join("p.csv"));
    let mut r = csv::Reader::from_path(tmp.path().join("w.csv")).unwrap();
    let pairs: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert!(!pairs.is_empty());
    for p in &pairs {
        assert_eq!(ind[&p[0]], ind[&p[1]], "{p:?}");
    }

    let mut bad = base.to_vec();
    bad.extend(["--exact-on", "region"]);
    assert_eq!(bin(&bad, tmp.path()).status.code(), Some(2));
}
