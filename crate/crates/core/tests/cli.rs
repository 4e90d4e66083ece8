use std::path::Path;
use std::process::Command;

fn pim(args: &[&str], dir: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_pim"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "pim {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A short synthetic experiment with a small encoder and few epochs.
fn quick_config(dir: &Path) {
    let template = pim(&["config", "--preset", "synthetic"], dir);
    let mut cfg = pim::eval::ExperimentConfig::from_toml(&template).unwrap();
    if let pim::eval::DataConfig::Synthetic(spec) = &mut cfg.data {
        spec.duration_s = 8.0;
    }
    cfg.n_runs = 2;
    cfg.encoder.conv_channels = vec![8, 12, 16];
    cfg.encoder.kernel_sizes = vec![9, 6, 4];
    cfg.pretrain.max_epochs = 2;
    cfg.finetune.max_epochs = 5;
    std::fs::write(dir.join("quick.toml"), cfg.to_toml().unwrap()).unwrap();
}

#[test]
fn config_presets_parse() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["pamap2", "synthetic"] {
        let text = pim(&["config", "--preset", preset], dir.path());
        pim::eval::ExperimentConfig::from_toml(&text).unwrap();
    }
}

#[test]
fn staged_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quick_config(d);
    pim(&["synth", "--config", "quick.toml", "--out", "corpus"], d);
    assert!(d.join("corpus/experiment.toml").exists());
    let cfg = "corpus/experiment.toml";
    pim(&["ingest", "--config", cfg, "--out", "windows.bin"], d);
    pim(
        &[
            "pseudolabel",
            "--config",
            cfg,
            "--windows",
            "windows.bin",
            "--out-dir",
            "labels",
        ],
        d,
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("labels/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["pseudo_classes"]["angle"], 132);
    let lines = std::fs::read_to_string(d.join("labels/pseudo_labels.jsonl")).unwrap();
    assert_eq!(
        lines.lines().count(),
        manifest["n_windows"].as_u64().unwrap() as usize
    );

    pim(
        &[
            "pretrain",
            "--config",
            cfg,
            "--windows",
            "windows.bin",
            "--out",
            "pre.json",
            "--history",
            "h.jsonl",
        ],
        d,
    );
    assert_eq!(
        std::fs::read_to_string(d.join("h.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    pim(
        &[
            "finetune",
            "--config",
            cfg,
            "--windows",
            "windows.bin",
            "--checkpoint",
            "pre.json",
            "--budget",
            "2",
            "--out",
            "clf.json",
            "--metrics",
            "fold.json",
        ],
        d,
    );
    let fold: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("fold.json")).unwrap()).unwrap();
    let f1 = fold["macro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    let stdout = pim(
        &[
            "evaluate",
            "--config",
            cfg,
            "--windows",
            "windows.bin",
            "--checkpoint",
            "pre.json",
            "--out-dir",
            "res",
        ],
        d,
    );
    assert!(stdout.contains("pim"));
    let report: pim::eval::ExperimentReport =
        serde_json::from_str(&std::fs::read_to_string(d.join("res/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(report.results.len(), 2);
    assert!(report.results.iter().all(|r| r.runs.len() == 2));

    pim(
        &[
            "report",
            "res/metrics.json",
            "--tsv",
            "table.tsv",
            "--json",
            "table.json",
        ],
        d,
    );
    let tsv = std::fs::read_to_string(d.join("table.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "n_runs = 0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pim"))
        .args(["evaluate", "--config", "bad.toml", "--out-dir", "x"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
