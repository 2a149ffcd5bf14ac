use std::path::Path;
use std::process::{Command, Output};

fn xvfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xvfl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_sweep(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "missing-sweep",
        "--out-dir",
        out.to_str().unwrap(),
        "--set",
        "steps=40",
        "--set",
        "replicates=1",
        "--set",
        "data.n=200",
        "--set",
        "missing.rates=[0.5]",
    ];
    args.extend_from_slice(extra);
    xvfl(&args)
}

#[test]
fn sweep_writes_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_sweep(dir.path(), &[]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["missing.csv", "missing_summary.json", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "missing-sweep");
    assert_eq!(manifest["config"]["steps"], 40);
    assert_eq!(manifest["datasets"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn config_file_and_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "steps = 30\nreplicates = 1\nmethods = [\"xvfl\"]\n[data]\nn = 200\n[imbalance]\nfractions = [0.7, 0.3]\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = xvfl(&[
        "run",
        "imbalance",
        cfg.to_str().unwrap(),
        "--seed",
        "42",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(out_dir.join("imbalance.csv")).unwrap();
    assert!(csv
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(2) == Some("42")));
    assert!(csv.contains(",ab_gap,"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [
        &["--set", "bogus=1"][..],
        &["--set", "missing.rates=[2.0]"],
        &["--set", "optimizer.batch=0"],
    ] {
        let out = small_sweep(dir.path(), bad);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{bad:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let missing = xvfl(&["run", "convergence", "/nonexistent/config.toml"]);
    assert_ne!(missing.status.code(), Some(0));
}

#[test]
fn divergence_exits_with_three_after_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_sweep(dir.path(), &["--set", "optimizer.eta=1e200"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("missing.csv")).unwrap();
    assert!(csv.contains(",diverged,1.0,"));
}

#[test]
fn batch_inference_from_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_sweep(
        dir.path(),
        &["--set", "save_models=true", "--set", "methods=[\"xvfl\"]"],
    );
    assert_eq!(out.status.code(), Some(0));
    let model = std::fs::read_dir(dir.path().join("models"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();

    let header: Vec<String> = (0..16)
        .map(|j| format!("f{j}"))
        .chain((0..16).map(|j| format!("mask_f{j}")))
        .collect();
    let mut text = header.join(",") + "\n";
    for r in 0..4 {
        let feats = (0..16).map(|j| format!("{:.2}", (r * 16 + j) as f64 * 0.1 - 3.0));
        let masks = (0..16).map(|j| if r == 3 && j >= 8 { "1" } else { "0" }.to_string());
        text += &(feats.chain(masks).collect::<Vec<_>>().join(",") + "\n");
    }
    let input = dir.path().join("x.csv");
    std::fs::write(&input, text).unwrap();
    let cfg = dir.path().join("infer.toml");
    std::fs::write(
        &cfg,
        format!(
            "[infer]\ncheckpoint = {:?}\ninput = {:?}\nmode = \"collaborative\"\n",
            model.to_str().unwrap(),
            input.to_str().unwrap()
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("pred");
    let out = xvfl(&[
        "run",
        "infer",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let pred = std::fs::read_to_string(out_dir.join("predictions.csv")).unwrap();
    let lines: Vec<&str> = pred.lines().collect();
    assert_eq!(lines[0], "row,prediction");
    assert_eq!(lines.len(), 5);
    assert!(lines[1..]
        .iter()
        .enumerate()
        .all(|(i, l)| l.starts_with(&format!("{i},"))));

    let wrong = xvfl(&[
        "run",
        "infer",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--set",
        "infer.mode=independent",
    ]);
    assert_eq!(
        wrong.status.code(),
        Some(2),
        "independent mode without a client is a config error"
    );
    let no_section = xvfl(&["run", "infer", "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(no_section.status.code(), Some(2));
}
