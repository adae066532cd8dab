use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use ttdioc_cli::config::RunConfig;

fn ttdioc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttdioc"))
        .args(args)
        .env("TTDIOC_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPRING_CONSTANT: &str = "system = \"spring1\"\nprofile = { kind = \"constant\", value = 3.0 }\n";

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 8);
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(ttdioc(&["--help"]).status.code(), Some(0));
    let out = ttdioc(&["--version"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(ttdioc(&["bogus"]).status.code(), Some(1));
    assert_eq!(ttdioc(&["ttd"]).status.code(), Some(1));
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.toml");
    assert_eq!(ttdioc(&["ttd", "--config", s(&missing)]).status.code(), Some(1));
}

#[test]
fn malformed_config_names_the_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "[ttd]\nbasis_cnt = 3\n");
    let out = ttdioc(&["ttd", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("basis_cnt") && err.contains("ttd"), "{err}");
}

#[test]
fn infeasible_forward_instance_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "inf.toml",
        "system = \"spring1\"\n[forward]\ntol_term = 0.0\nmax_outer = 2\n",
    );
    let out = ttdioc(&["solve-forward", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["succeeded"], false);
}

#[test]
fn forward_solve_writes_a_converged_solution() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SPRING_CONSTANT);
    let out_dir = tmp.path().join("o");
    let out = ttdioc(&["solve-forward", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sol: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("forward.json")).unwrap()).unwrap();
    assert_eq!(sol["converged"], true);
    assert!(sol["terminal_residual"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn fixed_seed_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SPRING_CONSTANT);
    let run = |dir: &str, seed: &str| {
        let out_dir = tmp.path().join(dir);
        let out = ttdioc(&["spioc", "--config", s(&cfg), "--out", s(&out_dir), "--seed", seed]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let a = run("a", "5");
    let b = run("b", "5");
    let c = run("c", "6");
    let read = |dir: &Path, name: &str| fs::read_to_string(dir.join(name)).unwrap();
    for name in ["iocsolution.json", "fig3.csv"] {
        assert!(read(&a, name) == read(&b, name), "{name} differs between reruns");
    }
    assert!(read(&a, "config.toml").contains("seed = 5"));
    assert!(read(&c, "config.toml").contains("seed = 6"));

    let gen = |dir: &str| {
        let out_dir = tmp.path().join(dir);
        let out = ttdioc(&["generate", "--config", s(&cfg), "--out", s(&out_dir), "--seed", "5"]);
        assert_eq!(out.status.code(), Some(0));
        fs::read(out_dir.join("dataset.json")).unwrap()
    };
    assert!(gen("g1") == gen("g2"), "dataset differs between reruns");
}

#[test]
fn manifest_echoes_config_and_version() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SPRING_CONSTANT);
    let out_dir = tmp.path().join("o");
    let out = ttdioc(&["generate", "--config", s(&cfg), "--out", s(&out_dir), "--threads", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["succeeded"], true);
    assert!(manifest["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
    assert!(manifest["duration_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(manifest["config"]["system"], "spring1");
    assert_eq!(manifest["config"]["data"]["horizon"], 30);
    assert_eq!(manifest["outputs"][0], "dataset.json");
}

#[test]
fn fitted_model_revalidates_from_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SPRING_CONSTANT);
    let fit = tmp.path().join("fit");
    assert_eq!(ttdioc(&["spioc", "--config", s(&cfg), "--out", s(&fit)]).status.code(), Some(0));
    let csv = fs::read_to_string(fit.join("fig3.csv")).unwrap();
    assert!(csv.starts_with("system,profile,method,e_v\nspring1,constant_3,spIOC,"));

    let check = tmp.path().join("check");
    let model = fit.join("iocsolution.json");
    let out = ttdioc(&["validate", "--config", s(&cfg), "--out", s(&check), "--model", s(&model)]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(check.join("validation.json")).unwrap()).unwrap();
    assert!(report["e_v"].as_f64().unwrap() <= 1e-6);

    let bogus = tmp.path().join("nothing.json");
    let out = ttdioc(&["validate", "--config", s(&cfg), "--out", s(&check), "--model", s(&bogus)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ttd_and_saved_dataset() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SPRING_CONSTANT);
    let gen = tmp.path().join("gen");
    assert_eq!(ttdioc(&["generate", "--config", s(&cfg), "--out", s(&gen)]).status.code(), Some(0));

    let text = format!(
        "{SPRING_CONSTANT}dataset = \"{}\"\n[ttd]\nbasis_count = 1\nomega_grid = {{ initial = 1.0, final = 1.0, step = 0.0 }}\nbeta_grid = {{ initial = 0.0, final = 0.0, step = 0.0 }}\n",
        gen.join("dataset.json").display()
    );
    let cfg = write_config(tmp.path(), "ttd.toml", &text);
    let out_dir = tmp.path().join("ttd");
    let out = ttdioc(&["ttd", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("iocsolution.json").exists());
    let csv = fs::read_to_string(out_dir.join("fig3.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("spring1,constant_3,TTD,"));
}

#[test]
fn kf_and_order_sweep() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "system = \"spring1\"\nprofile = { kind = \"harmonic_order\", order = 0 }\n[sweep]\norders = [0, 2]\n",
    );
    let kf = tmp.path().join("kf");
    assert_eq!(ttdioc(&["kf", "--config", s(&cfg), "--out", s(&kf)]).status.code(), Some(0));
    assert!(kf.join("kf_estimate.json").exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(kf.join("validation.json")).unwrap()).unwrap();
    assert!(report["e_v"].as_f64().unwrap() <= 1e-3);

    let sweep = tmp.path().join("sweep");
    let out = ttdioc(&["sweep", "order", "--config", s(&cfg), "--out", s(&sweep)]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(sweep.join("fig1.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "order,e_v");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("2,"));
}

#[test]
fn sweep_kind_is_checked() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SPRING_CONSTANT);
    assert_eq!(ttdioc(&["sweep", "x", "--config", s(&cfg)]).status.code(), Some(1));
}
