//! End-to-end runs of the experiment commands on a miniature config.

use std::fs;
use std::path::Path;

use clap::Parser;
use clsnav::{run, Cli, LAYER_ARMS};

fn config(dir: &Path, layers: usize) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "seed": 5,
        "data": { "train_samples": 40, "eval_samples": 16, "tiny_samples": 40 },
        "model": {
            "visual": { "n_layers": layers, "width": 8, "n_heads": 2 },
            "text": { "n_layers": 1, "n_heads": 2 },
            "decoder": { "n_layers": 1, "n_heads": 2 }
        },
        "pretrain": { "epochs": 1, "batch_size": 16, "target_retrieval": null },
        "segment": { "epochs": 2, "batch_size": 8 },
        "attention": { "images": 2, "summary_images": 16 }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    path
}

fn clsnav(cfg: &Path, out: &Path, args: &[&str]) -> anyhow::Result<()> {
    let mut argv = vec![
        "clsnav",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    argv.extend_from_slice(args);
    run(&Cli::parse_from(argv))
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 5);
    let out = dir.path().join("run");
    for cmd in [
        "gen-data",
        "pretrain",
        "train-seg",
        "evaluate",
        "zoomin-eval",
        "attention-dump",
    ] {
        clsnav(&cfg, &out, &[cmd]).unwrap_or_else(|e| panic!("{cmd}: {e:#}"));
        assert!(
            out.join(if cmd == "gen-data" { "data" } else { cmd_dir(cmd) })
                .join("run.json")
                .exists(),
            "{cmd}"
        );
    }
    clsnav(&cfg, &out, &["evaluate", "--arm", "gt-oracle"]).unwrap();

    let oracle = csv_rows(&out.join("evaluate/eval-fold0-gt-oracle.csv"));
    let summary: Vec<_> = oracle.iter().filter(|r| r[4] == "mIoU" || r[4] == "FB-IoU").collect();
    assert_eq!(summary.len(), 4);
    assert!(
        summary.iter().all(|r| r[5].parse::<f64>().unwrap() == 1.0),
        "{summary:?}"
    );

    let model = csv_rows(&out.join("evaluate/eval-fold0-model.csv"));
    assert!(model.iter().any(|r| r[3] == "unseen" && r[4] == "mIoU"));
    assert!(model.iter().all(|r| r[0] == model[0][0]));

    let zoom = csv_rows(&out.join("zoomin/zoomin-fold0.csv"));
    for method in ["plain", "zoomin_oracle", "boxes_oracle"] {
        assert!(zoom.iter().any(|r| r[3] == method), "{method}");
    }

    let index: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("attention/index.json")).unwrap()).unwrap();
    assert_eq!(index["summary"]["layer"], 4);
    let pgms = fs::read_dir(out.join("attention"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    // 2 images × 2 heads × {text, plain}
    assert_eq!(pgms, 8);
}

fn cmd_dir(cmd: &str) -> &str {
    match cmd {
        "pretrain" => "pretrain",
        "train-seg" => "segment/fold0-replace_cls-2-3-4",
        "evaluate" => "evaluate",
        "zoomin-eval" => "zoomin",
        "attention-dump" => "attention",
        _ => unreachable!(),
    }
}

#[test]
fn layer_ablation_has_one_row_per_window() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 12);
    let out = dir.path().join("run");
    for cmd in ["gen-data", "pretrain", "ablate-layers"] {
        clsnav(&cfg, &out, &[cmd]).unwrap_or_else(|e| panic!("{cmd}: {e:#}"));
    }
    let rows = csv_rows(&out.join("ablate-layers/ablate-layers-fold0.csv"));
    let arms: Vec<&str> = rows.iter().map(|r| r[3].as_str()).collect();
    assert_eq!(arms, LAYER_ARMS.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    for r in &rows {
        assert_eq!(r.len(), 7);
        let v: f64 = r[5].parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    clsnav(&cfg, &out, &["ablate-mechanism", "--arm", "vpt"]).unwrap();
    let rows = csv_rows(&out.join("ablate-mechanism/ablate-mechanism-fold0-vpt.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][3], "vpt");
    assert!(clsnav(&cfg, &out, &["ablate-mechanism", "--arm", "nope"]).is_err());
}

#[test]
fn missing_upstream_artifact_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 5);
    let out = dir.path().join("run");
    let err = format!("{:#}", clsnav(&cfg, &out, &["pretrain"]).unwrap_err());
    assert!(err.contains(&out.join("data/train").display().to_string()), "{err}");

    clsnav(&cfg, &out, &["gen-data"]).unwrap();
    let err = format!("{:#}", clsnav(&cfg, &out, &["train-seg"]).unwrap_err());
    assert!(err.contains(&out.join("pretrain").display().to_string()), "{err}");
}

#[test]
fn seed_flag_overrides_config_and_data_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 5);
    let out = dir.path().join("run");
    clsnav(&cfg, &out, &["gen-data", "--seed", "77"]).unwrap();
    let rec: serde_json::Value = serde_json::from_slice(&fs::read(out.join("data/run.json")).unwrap()).unwrap();
    assert_eq!(rec["seed"], 77);
    assert_eq!(rec["config"]["data"]["seed"], 77);
}

#[test]
fn config_errors_carry_a_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"segment": {"epochs": "ten"}}"#).unwrap();
    let err = format!("{:#}", clsnav(&path, dir.path(), &["gen-data"]).unwrap_err());
    assert!(err.contains("/segment/epochs"), "{err}");
}
