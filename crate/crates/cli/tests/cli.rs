use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cfrc(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfrc"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run cfrc")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A tiny pipeline: 16×16 grids, two-level networks, short strain range.
fn tiny_config(dir: &Path, n_cases: usize) -> PathBuf {
    let text = format!(
        r#"seed = 7
[microgen]
n_cases = {n_cases}
resolution = 16
[material.driver]
eps_f = 0.004
[rollout]
eps_f = 0.004
guard_floor = 20.0
[dataset]
n_test = 1
damage_threshold = 0.05
[network.damage1]
levels = 2
base_channels = 2
[network.damage2]
levels = 2
base_channels = 2
[network.uts]
levels = 2
base_channels = 2
[network.necking]
levels = 2
base_channels = 2
[train.damage1]
max_epochs = 2
[train.damage2]
max_epochs = 2
[train.uts]
max_epochs = 2
[train.necking]
max_epochs = 2
"#
    );
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_micro_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 3);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&cfrc(&cfg, &["--seed", "7", "--out", a.to_str().unwrap(), "gen-micro"]));
    ok(&cfrc(&cfg, &["--seed", "7", "--out", b.to_str().unwrap(), "gen-micro"]));
    for i in 0..3 {
        let name = format!("case-{i:04}.layout");
        let (x, y) = (std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name}");
    }
    let prov = std::fs::read_to_string(tmp.path().join("report/provenance/gen-micro.json")).unwrap();
    assert!(prov.contains("\"config_sha256\"") && prov.contains("\"seed\": 7"), "{prov}");
}

#[test]
fn training_without_a_dataset_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 2);
    let out = cfrc(&cfg, &["train", "--stage", "uts"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cfrc(&cfg, &["build-dataset"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[microgen]\nn_cases = 0\n").unwrap();
    assert_eq!(cfrc(&bad, &["gen-micro"]).status.code(), Some(2));
    assert_eq!(cfrc(&tmp.path().join("missing.toml"), &["gen-micro"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_cfrc")).arg("gen-micro").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_echo_pipeline_has_zero_error_and_full_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 3);
    ok(&cfrc(&cfg, &["--jobs", "2", "gen-micro"]));
    ok(&cfrc(&cfg, &["simulate"]));

    // Without a dataset the echo rollout covers every simulated case.
    ok(&cfrc(&cfg, &["rollout", "--backend", "oracle-echo"]));
    let out = cfrc(&cfg, &["evaluate", "--backend", "oracle-echo"]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rmse: Vec<f64> = stdout
        .lines()
        .filter_map(|l| l.split_whitespace().find_map(|w| w.strip_prefix("rmse_stress=")))
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(rmse.len(), 3, "{stdout}");
    assert!(rmse.iter().all(|&r| r < 1e-4), "{rmse:?}");

    // Stage order is enforced and rollout refuses an incomplete bundle.
    ok(&cfrc(&cfg, &["build-dataset"]));
    assert_eq!(cfrc(&cfg, &["train", "--stage", "uts"]).status.code(), Some(2));
    assert_eq!(cfrc(&cfg, &["rollout"]).status.code(), Some(2));

    ok(&cfrc(&cfg, &["train"]));
    for stage in ["damage1", "damage2", "uts", "necking"] {
        assert!(tmp.path().join(format!("checkpoints/{stage}.cnet")).is_file());
        let log = std::fs::read_to_string(tmp.path().join(format!("checkpoints/{stage}.log"))).unwrap();
        assert!(log.lines().next().unwrap().starts_with("step=1 "), "{log}");
    }
    ok(&cfrc(&cfg, &["rollout"]));
    ok(&cfrc(&cfg, &["evaluate"]));
    ok(&cfrc(&cfg, &["report"]));
    let report = tmp.path().join("report");
    for f in ["summary.txt", "metrics.json", "histogram.svg", "config.toml", "provenance/report.json"] {
        assert!(report.join(f).is_file(), "missing {f}");
    }
    assert_eq!(
        std::fs::read_to_string(report.join("config.toml")).unwrap(),
        std::fs::read_to_string(&cfg).unwrap()
    );
}
