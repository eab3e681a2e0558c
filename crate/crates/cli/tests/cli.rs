use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn npeb(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npeb"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("spawn npeb")
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

#[test]
fn solve_binomial_ten_converges_with_three_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("binomial_ten.toml");
    let o = npeb(&["solve", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(dir.path().join("result.json"));
    assert_eq!(r["result"]["converged"], true);
    assert_eq!(r["result"]["support"].as_array().unwrap().len(), 3);
    assert_eq!(r["support_labels"][0]["scalar"].as_f64().unwrap(), 0.001);
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,log_likelihood,residual,support_size\n"));
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 4);

    let m = json(dir.path().join("manifest.json"));
    assert_eq!(m["exit_code"], 0);
    assert!(m["git_describe"].as_str().is_some_and(|s| !s.is_empty()));
    // Every default in effect is echoed.
    for key in ["tol_fixed_point", "max_iterations", "prune_threshold", "prune_interval", "tol_coherence", "tol_stability"] {
        assert!(m["config"]["solve"][key].is_number(), "{key}");
    }
    for key in ["cap", "n_random", "n_targeted", "rel_tol"] {
        assert!(m["config"]["identification"][key].is_number(), "{key}");
    }
    assert!(m["config"]["independence"]["n_sim"].is_number());
    assert!(m["config"]["consistency"]["sigma"].is_number());
}

#[test]
fn budget_exhaustion_exits_2_with_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("binomial_ten.toml");
    let o = npeb(&["solve", "--config", cfg.to_str().unwrap(), "--max-iterations", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let r = json(dir.path().join("result.json"));
    assert_eq!(r["result"]["converged"], false);
    assert_eq!(json(dir.path().join("manifest.json"))["config"]["solve"]["max_iterations"], 1);
}

#[test]
fn malformed_csv_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("binomial_ten.toml");
    let data = fixture("malformed.csv");
    let o = npeb(&["solve", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    let o = npeb(&["discrimination", "--data", data.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = npeb(&["independence", "--data", data.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_sections_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(npeb(&["solve"], dir.path()).status.code(), Some(1));
    assert_eq!(npeb(&["diagnose"], dir.path()).status.code(), Some(1));
    assert_eq!(npeb(&["refine"], dir.path()).status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "sead = 1\n").unwrap();
    assert_eq!(npeb(&["consistency", "--config", bad.to_str().unwrap()], dir.path()).status.code(), Some(1));
}

#[test]
fn result_json_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let data = fixture("callbacks.csv");
    let args = ["discrimination", "--data", data.to_str().unwrap(), "--seed", "5", "--model", "frechet"];
    let oa = npeb(&args, a.path());
    let ob = npeb(&[&args[..], &["--threads", "1"]].concat(), b.path());
    assert_eq!(oa.status.code(), Some(0), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(ob.status.code(), Some(0));
    for f in ["result.json", "report.csv", "trace.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let r = json(a.path().join("result.json"));
    assert_eq!(r["seed"], 5);
    assert!(r["report"]["support_size"].as_u64().unwrap() <= 24);
    let csv = std::fs::read_to_string(a.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("callback,count,beta,p,p_f,p_m,pr_f_gt_m,pr_f_eq_m,pr_f_lt_m\n"));
    assert_eq!(csv.lines().count(), 26);
}

#[test]
fn cache_round_trip_gives_identical_results() {
    let cache = tempfile::tempdir().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let data = fixture("callbacks.csv");
    let args = ["discrimination", "--data", data.to_str().unwrap(), "--cache-dir", cache.path().to_str().unwrap()];
    assert_eq!(npeb(&args, a.path()).status.code(), Some(0));
    let cached: Vec<_> = std::fs::read_dir(cache.path()).unwrap().collect();
    assert_eq!(cached.len(), 2);
    assert_eq!(npeb(&args, b.path()).status.code(), Some(0));
    assert_eq!(std::fs::read(a.path().join("result.json")).unwrap(), std::fs::read(b.path().join("result.json")).unwrap());
}

#[test]
fn independent_model_reports_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture("callbacks.csv");
    let o = npeb(&["discrimination", "--data", data.to_str().unwrap(), "--model", "independent"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let r = json(dir.path().join("result.json"));
    assert!(!r["report"]["warnings"].as_array().unwrap().is_empty());
    assert_eq!(r["report"]["identification"]["rank_ok"], false);
}

#[test]
fn diagnose_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let gk = fixture("goalkeepers.toml");
    let o = npeb(&["diagnose", "--config", gk.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rank_ok           true"));
    assert_eq!(json(dir.path().join("result.json"))["identification"]["rank_ok"], true);

    let ind = fixture("independent_callbacks.toml");
    let o = npeb(&["diagnose", "--config", ind.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let r = json(dir.path().join("result.json"));
    assert_eq!(r["identification"]["rank_ok"], false);
    assert!(r["identification"]["min_singular_value_seen"].as_f64().unwrap() < 1e-10);

    // Targeted at a previous solve's support, with the boundary diagnostic.
    let bt = fixture("binomial_ten.toml");
    let solved = tempfile::tempdir().unwrap();
    assert_eq!(npeb(&["solve", "--config", bt.to_str().unwrap()], solved.path()).status.code(), Some(0));
    let res = solved.path().join("result.json");
    let o = npeb(&["diagnose", "--config", bt.to_str().unwrap(), "--result", res.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let r = json(dir.path().join("result.json"));
    assert!(r["boundary"]["kl"].as_f64().unwrap() > 0.0);
    assert_eq!(r["boundary"]["zero_outcomes"], 6);
}

#[test]
fn independence_command() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture("callbacks.csv");
    let o = npeb(&["independence", "--data", data.to_str().unwrap(), "--n-sim", "2000", "--seed", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let r = json(dir.path().join("result.json"));
    assert!(r["p_value"].as_f64().unwrap() <= 1e-3);
    assert_eq!(r["config"]["seed"], 3);
}

#[test]
fn study_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("refine.toml");
    let o = npeb(&["refine", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(dir.path().join("result.json"));
    assert_eq!(r["likelihood_nondecreasing"], true);
    assert_eq!(std::fs::read_to_string(dir.path().join("report.csv")).unwrap().lines().count(), 4);

    let cfg = fixture("consistency_small.toml");
    let o = npeb(&["consistency", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(dir.path().join("report.csv")).unwrap().lines().count(), 5);
}
