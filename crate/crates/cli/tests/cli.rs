use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn invman(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_invman"))
        .args(args)
        .current_dir(cwd)
        .env_remove("INVMAN_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn deterministic_solve_writes_point_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = invman(
        &["solve", "--deterministic", "--output-dir", "out"],
        tmp.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = tmp.path().join("out");
    for f in ["config.toml", "result.json", "metadata.json", "COMPLETED"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("result.json")).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["point"]["h"].as_array().unwrap().len(), 8);
    assert!(v["report"]["iterations"].as_u64().unwrap() >= 1);
    // Leading coefficient of the graph at ξ = 0.01 e_1 is the closed form up to O(r³).
    let h3 = v["point"]["h"][2].as_f64().unwrap();
    let cf3 = v["closed_form"][2].as_f64().unwrap();
    assert!((h3 - cf3).abs() < 1e-3 * cf3.abs());
}

#[test]
fn completed_run_is_not_overwritten_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["solve", "--deterministic", "--output-dir", "out"];
    assert!(invman(&args, tmp.path()).status.success());
    let again = invman(&args, tmp.path());
    assert_eq!(again.status.code(), Some(2));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(invman(&forced, tmp.path()).status.success());
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = invman(&["solve", "--config", "absent.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}

#[test]
fn validate_lists_every_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = invman(&["validate"], tmp.path());
    assert!(clean.status.success());

    let cfg = write_config(tmp.path(), "[noise]\nsigma = 2.0\n[solver]\nbeta = -2.0\n");
    let out = invman(&["validate", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("σ < -λ_u"), "{err}");
    assert!(err.contains("λ_u < β < λ_s"), "{err}");
    assert!(err.contains("σ < (λ_s - (p-1)λ_u)/p"), "{err}");
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[solver]\ntolerence = 1e-10\n");
    let out = invman(&["validate", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shape_study_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[study]\nsigma_list = [0.1]\nn_samples = 3\nconcurrency = 2\n",
    );
    for dir in ["a", "b"] {
        let out = invman(
            &["shape-study", "--config", &cfg, "--output-dir", dir],
            tmp.path(),
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(out.stdout.iter().all(|b| b.is_ascii()));
    }
    for f in ["cells.csv", "result.json", "config.toml"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let csv = fs::read_to_string(tmp.path().join("a/cells.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 3);
}

#[test]
fn failures_over_budget_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[study]\nradius_list = [0.5]\ndeterministic = true\n",
    );
    let out = invman(
        &["shape-study", "--config", &cfg, "--output-dir", "out"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    let dir = tmp.path().join("out");
    assert!(dir.join("cells.csv").exists());
    assert!(!dir.join("COMPLETED").exists());
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_invman"))
        .args(["k-diagnostics", "--seed", "4"])
        .current_dir(tmp.path())
        .env("INVMAN_OUTPUT_ROOT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let echo = fs::read_to_string(tmp.path().join("root/k-diagnostics/config.toml")).unwrap();
    assert!(echo.contains("base_seed = 4"));
}

#[test]
fn unwritable_output_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("blocker"), "").unwrap();
    let out = invman(
        &["solve", "--deterministic", "--output-dir", "blocker/out"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(4));
}
