use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde_json::{json, Value};

fn canopy(cmd: &str, config: &Value, dir: &Path, out: &str) -> PathBuf {
    let cfg_path = dir.join(format!("{out}.config.json"));
    fs::write(&cfg_path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    let out = dir.join(out);
    let status = Command::new(env!("CARGO_BIN_EXE_canopy"))
        .args([cmd, "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success(), "canopy {cmd} failed");
    out
}

fn canopy_fails(cmd: &str, config: &Value, dir: &Path, out: &str) -> bool {
    let cfg_path = dir.join(format!("{out}.config.json"));
    fs::write(&cfg_path, config.to_string()).unwrap();
    !Command::new(env!("CARGO_BIN_EXE_canopy"))
        .args([cmd, "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.join(out))
        .env("RUST_LOG", "off")
        .stderr(Stdio::null())
        .status()
        .unwrap()
        .success()
}

fn manifest_outputs(out: &Path) -> Vec<String> {
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect()
}

fn small_spec() -> Value {
    json!({"kind": "scenes", "preset": "target", "count": 2, "seed": 11})
}

fn small_encoder() -> Value {
    json!({"scales": [0.5, 2.0], "dim": 8, "hidden": 8})
}

fn experiment(dir: &Path, strategy: &str, extra: Value) -> Value {
    let mut cfg = json!({
        "task": "instseg",
        "strategy": strategy,
        "reduction": {"kind": "uniform", "proportion": 0.01, "seed": 1},
        "data": {"source": dir.join("source"), "train": dir.join("train"), "test": dir.join("test")},
        "budgets": {"adapt_steps": 10, "finetune_steps": 10, "batch_points": 256},
        "encoder": small_encoder(),
        "seeds": [3],
        "curve_points": 2,
        "out": "ignored"
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    cfg
}

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for name in ["source", "train", "test"] {
        let out = canopy("synth", &small_spec(), dir, name);
        assert_eq!(manifest_outputs(&out), vec!["scene_000.csv", "scene_001.csv", "scenes.json"]);
        let head = fs::read_to_string(out.join("scene_000.csv")).unwrap();
        assert!(head.starts_with("x,y,z,intensity,echo,semantic,instance,labeled\n"));
    }

    let pre = canopy(
        "pretrain",
        &json!({"scenes": dir.join("train"), "held_out": dir.join("test"), "encoder": small_encoder(), "steps": 4}),
        dir,
        "pretrain",
    );
    let history = fs::read_to_string(pre.join("history.csv")).unwrap();
    assert!(history.starts_with("step,loss,pos_sim,neg_sim\n"));
    assert_eq!(history.lines().count(), 5);

    let runs: Vec<PathBuf> = (0..2)
        .map(|i| canopy("train", &experiment(dir, "scratch", json!({})), dir, &format!("scratch_{i}")))
        .collect();
    let metrics: Vec<Vec<u8>> = runs.iter().map(|r| fs::read(r.join("seed_3/metrics.json")).unwrap()).collect();
    assert_eq!(metrics[0], metrics[1]);
    let outputs = manifest_outputs(&runs[0]);
    for f in ["seed_3/checkpoint.json", "seed_3/record.json", "seed_3/per_scene.csv", "seed_3/instances_000.csv"] {
        assert!(outputs.iter().any(|o| o == f), "missing {f}");
    }
    let inst = fs::read_to_string(runs[0].join("seed_3/instances_000.csv")).unwrap();
    assert!(inst.starts_with("point_index,instance_id,semantic,confidence\n"));

    let adapted = canopy(
        "adapt",
        &experiment(dir, "ssl_adapt_finetune", json!({"pretrained": pre.join("encoder.json")})),
        dir,
        "adapt",
    );
    let ckpt = adapted.join("seed_3/checkpoint.json");
    assert!(ckpt.exists());
    let tuned = canopy(
        "finetune",
        &experiment(dir, "ssl_finetune", json!({"pretrained": ckpt, "finetune_mode": "head_only"})),
        dir,
        "finetune",
    );
    assert!(tuned.join("seed_3/metrics.json").exists());
    assert!(canopy_fails("finetune", &experiment(dir, "scratch", json!({})), dir, "bad_finetune"));

    let reduced = canopy(
        "reduce",
        &json!({"input": dir.join("train"), "reduction": {"kind": "tree_level", "n_trees": 1, "seed": 0}}),
        dir,
        "reduced",
    );
    assert_eq!(manifest_outputs(&reduced), vec!["scene_000.csv", "scene_001.csv"]);

    let eval = canopy(
        "eval",
        &json!({"task": "instseg", "checkpoint": runs[0].join("seed_3/checkpoint.json"), "test": dir.join("test")}),
        dir,
        "eval",
    );
    let m: Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert!(m["ap50"].is_number());

    let report = canopy("report", &json!({"records": [runs[0].clone(), tuned.clone()]}), dir, "report");
    let table = fs::read_to_string(report.join("table_instseg.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(report.join("curves.csv").exists());
}

#[test]
fn tree_dataset_and_classification() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let trees = |seed: u64, n: usize| {
        json!({"kind": "trees", "species": [1, 4], "per_species": n, "density": 10.0, "max_points": 64, "seed": seed})
    };
    let train = canopy("synth", &trees(1, 12), dir, "trees_train");
    let test = canopy("synth", &trees(2, 4), dir, "trees_test");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(train.join("trees.json")).unwrap()).unwrap();
    assert_eq!(manifest.as_array().unwrap().len(), 24);
    let cfg = json!({
        "task": "treecls", "strategy": "scratch", "species": [1, 4], "shots": 8, "hidden": 8,
        "data": {"train": train, "test": test},
        "budgets": {"finetune_steps": 10}, "encoder": small_encoder(), "seeds": [0], "out": "x"
    });
    let a = canopy("train", &cfg, dir, "cls_a");
    let b = canopy("train", &cfg, dir, "cls_b");
    let ma = fs::read(a.join("seed_0/metrics.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("seed_0/metrics.json")).unwrap());
    let eval = canopy(
        "eval",
        &json!({"task": "treecls", "checkpoint": a.join("seed_0/checkpoint.json"), "test": test, "species": [1, 4]}),
        dir,
        "cls_eval",
    );
    let m: Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert!(m["classification"]["mean_jaccard"].is_number());
}

#[test]
fn invalid_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = json!({"task": "instseg", "strategy": "ssl_finetune", "data": {}, "out": "x"});
    assert!(canopy_fails("train", &cfg, dir, "bad"));
    assert!(canopy_fails("synth", &json!({"kind": "trees", "species": [99], "per_species": 1, "density": 1.0, "max_points": 10}), dir, "bad_synth"));
}
