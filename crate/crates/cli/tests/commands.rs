use std::path::Path;
use std::process::{Command, Output};

fn wsp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsp"))
        .args(args)
        .env("WSP_THREADS", "1")
        .output()
        .expect("wsp runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        let rel = entry.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        out.push((rel, std::fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            files.extend(walk(&path));
        } else {
            files.push(path);
        }
    }
    files
}

/// Small dataset: 20 patients of 6 slices at 16x16, with an MLP encoder.
fn small_setup(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = root.join("data");
    ok(&wsp(&["generate", "--out", p(&data), "--volumes", "20", "--slices", "6", "--size", "16x16", "--seed", "7"]));
    let cfg = root.join("run.json");
    std::fs::write(
        &cfg,
        r#"{"encoder": {"arch": "mlp", "mlp_hidden": [32], "repr_dim": 24, "proj_hidden": 16, "proj_dim": 8},
            "optim": {"lr": 0.003}, "probe": {"folds": 3}}"#,
    )
    .unwrap();
    (data, cfg)
}

#[test]
fn generate_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        ok(&wsp(&["generate", "--out", p(d), "--volumes", "5", "--slices", "4", "--size", "8x8", "--seed", "7"]));
    }
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b));
    let ds = wsp_core::data::load_dataset(&a).unwrap();
    assert_eq!(ds.volumes.len(), 5);
    assert!(a.join("run_config.json").exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = wsp(&["generate", "--out", p(dir.path()), "--volumes", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(wsp(&["generate", "--bogus"]).status.code(), Some(2));
    assert_eq!(wsp(&["generate", "--out", p(dir.path()), "--size", "8by8"]).status.code(), Some(2));
    let out = wsp(&["sweep", "--data", p(dir.path()), "--sigmas", ""]);
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"optim": {"learning_rate": 1}}"#).unwrap();
    assert_eq!(wsp(&["--config", p(&bad), "gradcheck"]).status.code(), Some(2));
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = wsp(&["probe", "--data", p(&dir.path().join("nope")), "--ckpt", "random", "--out", "m.csv"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn help_lists_flags_and_defaults() {
    let text = ok(&wsp(&["pretrain", "--help"]));
    for flag in ["--loss", "--sigma", "--tau", "--epochs", "--batch", "--arch", "--out", "--seed", "default: 0.1", "default: 30"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn gradcheck_passes() {
    let text = ok(&wsp(&["gradcheck", "--seed", "3", "--batches", "4"]));
    for kind in ["wsp", "supcon", "depth_aware", "infonce"] {
        assert!(text.contains(kind));
    }
}

#[test]
fn pretrain_probe_project_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = small_setup(dir.path());
    let run = |sub: &str| dir.path().join(sub);
    for tag in ["r1", "r2"] {
        let ckpt = run(tag).join("model.wspc");
        ok(&wsp(&["--config", p(&cfg), "pretrain", "--data", p(&data), "--epochs", "2", "--batch", "8", "--out", p(&ckpt), "--seed", "5"]));
        let metrics = run(tag).join("metrics.csv");
        let text = ok(&wsp(&["--config", p(&cfg), "probe", "--data", p(&data), "--ckpt", p(&ckpt), "--out", p(&metrics)]));
        assert!(text.contains("AUC"));
        ok(&wsp(&[
            "--config", p(&cfg), "project", "--data", p(&data), "--ckpt", p(&ckpt),
            "--out", p(&run(tag).join("pca.csv")), "--svg", p(&run(tag).join("pca.svg")),
        ]));
    }
    for file in ["model.wspc", "model.loss.csv", "metrics.csv", "pca.csv", "pca.svg", "run_config.json"] {
        let a = std::fs::read(run("r1").join(file)).unwrap();
        let b = std::fs::read(run("r2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between replays");
    }
    let metrics = std::fs::read_to_string(run("r1").join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("method,sigma,fold,auc_patient,auc_slice,bacc"));
    assert_eq!(lines.filter(|l| l.starts_with("wsp,")).count(), 3);
    let pca = std::fs::read_to_string(run("r1").join("pca.csv")).unwrap();
    let rows = pca.lines().filter(|l| !l.starts_with('#')).count() - 1;
    // 20 patients x round(0.7 * 6) central slices
    assert_eq!(rows, 20 * 4);
    let svg = std::fs::read_to_string(run("r1").join("pca.svg")).unwrap();
    assert!(svg.starts_with("<?xml") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<circle").count(), rows);
    let curve = std::fs::read_to_string(run("r1").join("model.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
}

#[test]
fn random_sentinel_and_sigma_warning() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = small_setup(dir.path());
    let metrics = dir.path().join("random.csv");
    let text = ok(&wsp(&["--config", p(&cfg), "probe", "--data", p(&data), "--ckpt", "random", "--out", p(&metrics)]));
    assert!(text.starts_with("random:"));
    let out = wsp(&[
        "--config", p(&cfg), "pretrain", "--data", p(&data), "--loss", "supcon", "--sigma", "0.3",
        "--epochs", "1", "--batch", "8", "--out", p(&dir.path().join("s.wspc")),
    ]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ignored"));
}

#[test]
fn sweep_writes_one_row_per_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = small_setup(dir.path());
    let out = dir.path().join("sweep.csv");
    ok(&wsp(&[
        "--config", p(&cfg), "sweep", "--data", p(&data), "--sigmas", "0.05,0.5", "--epochs", "1", "--batch", "8",
        "--out", p(&out),
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("0.05,"));
}
