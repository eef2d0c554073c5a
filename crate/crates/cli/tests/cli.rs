use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn slidewin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slidewin"))
        .current_dir(dir)
        .env_remove("SLIDEWIN_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn calibration_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/calibration")
}

/// Noisy, perturbed multi-window scene in the calibration family.
fn noisy_config(dir: &Path, seed: u64, n_windows: usize) -> PathBuf {
    let mut cfg = json(calibration_dir().join("nf080_s0.json"));
    cfg["seed"] = seed.into();
    cfg["n_windows"] = n_windows.into();
    let path = dir.join("noisy.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn output_hashes(manifest: &Value) -> Vec<String> {
    manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["sha256"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn gen_writes_three_files_reproducibly() {
    let t = tempfile::tempdir().unwrap();
    let cfg = noisy_config(t.path(), 5, 2);
    let cfg = cfg.to_str().unwrap();
    let o = slidewin(t.path(), &["--out", "a", "--config", cfg, "gen"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(t.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["ground_truth.json", "manifest.json", "stream.json"]);

    let o = slidewin(t.path(), &["--out", "b", "--config", cfg, "gen"]);
    assert_eq!(code(&o), 0);
    let a = json(t.path().join("a/manifest.json"));
    let b = json(t.path().join("b/manifest.json"));
    assert_eq!(output_hashes(&a), output_hashes(&b));
    assert_eq!(a["seeds"], serde_json::json!([5]));
    assert_eq!(
        fs::read(t.path().join("a/stream.json")).unwrap(),
        fs::read(t.path().join("b/stream.json")).unwrap()
    );
}

#[test]
fn gen_seed_flag_changes_stream() {
    let t = tempfile::tempdir().unwrap();
    let cfg = noisy_config(t.path(), 5, 1);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&slidewin(t.path(), &["--out", "a", "--config", cfg, "gen"])), 0);
    assert_eq!(code(&slidewin(t.path(), &["--out", "b", "--config", cfg, "--seed", "6", "gen"])), 0);
    let a = json(t.path().join("a/manifest.json"));
    let b = json(t.path().join("b/manifest.json"));
    assert_ne!(output_hashes(&a), output_hashes(&b));
    assert_eq!(b["seeds"], serde_json::json!([6]));
}

#[test]
fn gen_rejects_too_few_features_with_location() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("bad.json"), "{\n  \"n_keyframes\": 11,\n  \"n_features\": 4\n}\n").unwrap();
    let o = slidewin(t.path(), &["--out", "x", "--config", "bad.json", "gen"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("bad.json:3: n_features"), "{err}");
    assert!(!t.path().join("x/stream.json").exists());
}

#[test]
fn gen_reports_json_syntax_position() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("bad.json"), "{\n  \"n_features\": ,\n}\n").unwrap();
    let o = slidewin(t.path(), &["--out", "x", "--config", "bad.json", "gen"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.json:2:"), "{}", stderr(&o));
}

#[test]
fn solve_zero_noise_recovers_truth() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.json"), "{\"n_windows\": 3}").unwrap();
    assert_eq!(code(&slidewin(t.path(), &["--out", "g", "--config", "c.json", "gen"])), 0);
    let o = slidewin(
        t.path(),
        &["--out", "s", "--gt", "g/ground_truth.json", "solve", "g/stream.json"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("ATE ")).unwrap().to_string();
    let ate: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(ate < 1e-6, "{line}");

    let csv = fs::read_to_string(t.path().join("s/trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("kf_id,px,py,pz,qw,qx,qy,qz"));
    assert_eq!(lines.count(), 13);
}

#[test]
fn solve_stats_path_and_schema() {
    let t = tempfile::tempdir().unwrap();
    let cfg = noisy_config(t.path(), 9, 2);
    assert_eq!(
        code(&slidewin(t.path(), &["--out", "g", "--config", cfg.to_str().unwrap(), "gen"])),
        0
    );
    let o = slidewin(t.path(), &["--out", "s", "--stats", "per_window.json", "solve", "g/stream.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stats = json(t.path().join("per_window.json"));
    let windows = stats.as_array().unwrap();
    assert_eq!(windows.len(), 2);
    for (k, w) in windows.iter().enumerate() {
        assert_eq!(w["window"], k);
        let s = &w["stats"];
        assert!(s["iterations_run"].as_u64().unwrap() >= 1);
        assert!(s["cost_trace"].as_array().unwrap().len() >= 2);
        assert!(s["records"].as_array().unwrap()[0]["cholesky_update_ops"].as_u64().unwrap() > 0);
        assert!(w["solver_error"].is_null());
    }
    let manifest = json(t.path().join("s/manifest.json"));
    let paths: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["path"].as_str().unwrap())
        .collect();
    assert!(paths.contains(&"per_window.json"), "{paths:?}");
}

fn edit_stream(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    fs::write(dir.join("c.json"), "{\"n_windows\": 3}").unwrap();
    assert_eq!(code(&slidewin(dir, &["--out", "g", "--config", "c.json", "gen"])), 0);
    let mut stream = json(dir.join("g/stream.json"));
    edit(&mut stream);
    let path = dir.join("edited.json");
    fs::write(&path, stream.to_string()).unwrap();
    path
}

#[test]
fn solve_names_malformed_window() {
    let t = tempfile::tempdir().unwrap();
    let path = edit_stream(t.path(), |s| {
        s["windows"][2].as_object_mut().unwrap().remove("imu_factors");
    });
    let o = slidewin(t.path(), &["--out", "s", "solve", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("window 2"), "{}", stderr(&o));
}

#[test]
fn solve_names_window_that_fails_validation() {
    let t = tempfile::tempdir().unwrap();
    let path = edit_stream(t.path(), |s| {
        s["windows"][1]["observations"][0]["feature_id"] = 1_000_000.into();
    });
    let o = slidewin(t.path(), &["--out", "s", "solve", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("window 1"), "{}", stderr(&o));
}

#[test]
fn solve_divergence_exits_3_with_window() {
    let t = tempfile::tempdir().unwrap();
    let path = edit_stream(t.path(), |s| {
        s["windows"][1]["observations"][0]["uv"][0] = 1e300.into();
    });
    let o = slidewin(t.path(), &["--out", "s", "solve", path.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("window 1"), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    let stats = json(t.path().join("s/stats.json"));
    assert!(stats[1]["solver_error"].is_string());
}

#[test]
fn solve_rejects_bad_lm_config() {
    let t = tempfile::tempdir().unwrap();
    let path = edit_stream(t.path(), |_| {});
    fs::write(t.path().join("lm.json"), "{\"mu_up\": 0.5}").unwrap();
    let o = slidewin(
        t.path(),
        &["--out", "s", "--config", "lm.json", "solve", path.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn output_never_overwrites_input() {
    let t = tempfile::tempdir().unwrap();
    let path = edit_stream(t.path(), |_| {});
    let before = fs::read(&path).unwrap();
    let o = slidewin(
        t.path(),
        &["--out", ".", "--stats", "edited.json", "solve", path.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2);
    assert_eq!(fs::read(&path).unwrap(), before);
}

#[test]
fn model_default_window_report() {
    let t = tempfile::tempdir().unwrap();
    let o = slidewin(t.path(), &["--out", "m", "model", "--n", "165", "--m", "6"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = json(t.path().join("m/cost_report.json"));
    let speedup = doc["ratios"]["cholesky_speedup"].as_f64().unwrap();
    assert!((5.3..=6.2).contains(&speedup), "{speedup}");
    assert_eq!(doc["report"]["cycles_cholesky_sequential_baseline"], 165 * 166 * 167 / 6);

    let sweep = fs::read_to_string(t.path().join("m/sweep.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(lines.next(), Some("n,m,mode,cycles,speedup"));
    assert_eq!(lines.count(), 141 * 5 * 2);

    let o = slidewin(t.path(), &["--out", "a", "model", "--audit", "default-window"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("imu jacobian")).unwrap();
    assert!(line.contains("72.0% reduction"), "{line}");
}

#[test]
fn model_rejects_bad_ranges() {
    let t = tempfile::tempdir().unwrap();
    let o = slidewin(t.path(), &["--out", "m", "model", "--sweep-n", "9-3"]);
    assert_eq!(code(&o), 2);
    let o = slidewin(t.path(), &["--out", "m", "model", "--audit", "3,4"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn calibrate_then_run_adaptive_with_baseline() {
    let t = tempfile::tempdir().unwrap();
    let scenes = calibration_dir();
    let o = slidewin(
        t.path(),
        &[
            "--out",
            "cal",
            "calibrate",
            "--scenes",
            scenes.to_str().unwrap(),
            "--target",
            "1e-4",
            "--date",
            "2026-01-01",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = json(t.path().join("cal/table.json"));
    let entries = table["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 3);
    for e in entries {
        assert!(!e["flagged"].as_bool().unwrap(), "{e}");
        assert!(e["scenes"].as_u64().unwrap() >= 3);
    }
    assert_eq!(json(t.path().join("cal/manifest.json"))["seeds"].as_array().unwrap().len(), 9);

    let cfg = noisy_config(t.path(), 4242, 4);
    assert_eq!(
        code(&slidewin(t.path(), &["--out", "g", "--config", cfg.to_str().unwrap(), "gen"])),
        0
    );
    let o = slidewin(
        t.path(),
        &[
            "--out",
            "ra",
            "--table",
            "cal/table.json",
            "--gt",
            "g/ground_truth.json",
            "--baseline",
            "run-adaptive",
            "g/stream.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("delta ATE"));
    let report = json(t.path().join("ra/report.json"));
    let delta = report["delta_ate"].as_f64().unwrap();
    let ate = report["ate"].as_f64().unwrap();
    let base = report["baseline_ate"].as_f64().unwrap();
    assert!((delta - (ate - base)).abs() <= 1e-12 * base.max(1e-30), "{report}");
    assert!(report["energy_ratio"].as_f64().unwrap() >= 1.0);
    assert!(t.path().join("ra/baseline_trajectory.csv").exists());

    // The trace feeds the power model.
    let o = slidewin(t.path(), &["--out", "m", "model", "--trace", "ra/trace.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = json(t.path().join("m/cost_report.json"));
    assert_eq!(doc["ratios"]["energy_ratio"], report["energy_ratio"]);
}

#[test]
fn calibrate_with_too_few_scenes_exits_4() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path().join("few");
    fs::create_dir(&dir).unwrap();
    fs::copy(calibration_dir().join("nf040_s0.json"), dir.join("a.json")).unwrap();
    let o = slidewin(t.path(), &["--out", "c", "calibrate", "--scenes", "few"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("bucket 0"), "{}", stderr(&o));
}

#[test]
fn calibrate_accepts_gen_directories() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path().join("scenes");
    fs::create_dir(&dir).unwrap();
    for seed in 1..=3 {
        let cfg = noisy_config(t.path(), seed, 1);
        let out = format!("scenes/s{seed}");
        assert_eq!(
            code(&slidewin(t.path(), &["--out", &out, "--config", cfg.to_str().unwrap(), "gen"])),
            0
        );
    }
    let o = slidewin(t.path(), &["--out", "c", "calibrate", "--scenes", "scenes"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = json(t.path().join("c/table.json"));
    assert_eq!(table["entries"][1]["scenes"], 3);
}

#[test]
fn run_adaptive_argument_errors() {
    let t = tempfile::tempdir().unwrap();
    let path = edit_stream(t.path(), |_| {});
    let p = path.to_str().unwrap();
    assert_eq!(code(&slidewin(t.path(), &["--out", "r", "run-adaptive", p])), 2);
    fs::write(t.path().join("table.json"), "{}").unwrap();
    let o = slidewin(t.path(), &["--out", "r", "--table", "table.json", "--baseline", "run-adaptive", p]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--gt"));
}

#[test]
fn out_directory_from_environment() {
    let t = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_slidewin"))
        .current_dir(t.path())
        .env("SLIDEWIN_OUT", "from_env")
        .args(["model"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(t.path().join("from_env/cost_report.json").exists());
}
