//! End-to-end runs of the `offrl` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use offrl::cli::{COMPARISON_HEADER, METRICS_HEADER, STATS_HEADER, SWEEP_HEADER, TRAIN_METRICS_HEADER};
use offrl::datasets::{dataset_stats, load};

fn offrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_offrl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: serde_json::Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn small_agent() -> serde_json::Value {
    serde_json::json!({
        "total_steps": 600,
        "eval_interval": 200,
        "log_interval": 100,
        "hidden": [16, 16],
        "eval_episodes": 2,
        "separability_samples": 200,
        "grad_norm_samples": 200
    })
}

fn small_recipe(ratio: f64) -> serde_json::Value {
    serde_json::json!({"recipe": {"mix": "expert-random", "ratio": ratio, "n": 2000, "seed": 1}})
}

fn csv_rows(path: &Path) -> (String, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

#[test]
fn dataset_command_writes_data_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = offrl(&[
        "dataset",
        "--env",
        "pointmass2d",
        "--mix",
        "expert-random",
        "--ratio",
        "0.5",
        "--n",
        "4000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ds = load(&out.join("er50.jsonl")).unwrap();
    let stats = dataset_stats(&ds);
    assert_eq!((stats.total, stats.expert, stats.random), (4000, 2000, 2000));
    let (header, rows) = csv_rows(&out.join("stats.csv"));
    assert_eq!(header, STATS_HEADER);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "er50");
    assert_eq!(rows[0][2..7], ["4000", "2000", "0", "2000", "2000"]);
    let avg: f64 = rows[0][7].parse().unwrap();
    let recount = ds.transitions.iter().map(|t| t.r).sum::<f64>() / ds.len() as f64;
    assert!((avg - recount).abs() <= 1e-12 * recount.abs().max(1.0));
}

#[test]
fn train_is_reproducible_and_summaries_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let cfg = write_config(
            dir.path(),
            &format!("{run}.json"),
            serde_json::json!({
                "agent": small_agent(),
                "dataset": small_recipe(0.3),
                "output_dir": out,
                "seeds": [0, 1],
                "workers": 2
            }),
        );
        let o = offrl(&["train", &cfg]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(out);
    }
    for seed in ["seed_0", "seed_1"] {
        for f in ["metrics.csv", "train_metrics.csv", "checkpoint_final.json", "summary.json"] {
            assert_eq!(
                fs::read(outs[0].join(seed).join(f)).unwrap(),
                fs::read(outs[1].join(seed).join(f)).unwrap(),
                "{seed}/{f} differs between identical runs"
            );
        }
        let run = outs[0].join(seed);
        let (header, rows) = csv_rows(&run.join("metrics.csv"));
        assert_eq!(header, METRICS_HEADER);
        assert_eq!(rows.len(), 3);
        assert_eq!(csv_rows(&run.join("train_metrics.csv")).0, TRAIN_METRICS_HEADER);
        let scores: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
        let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
        let window = summary["final_window"].as_u64().unwrap() as usize;
        let tail = &scores[scores.len() - window..];
        let mean = tail.iter().sum::<f64>() / window as f64;
        assert!((summary["final_mean"].as_f64().unwrap() - mean).abs() < 1e-9);
        assert!(run.join("checkpoint_best.json").exists());
    }
    let agg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(outs[0].join("summary.json")).unwrap()).unwrap();
    assert_eq!(agg["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn ablate_reports_every_variant_per_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    let cfg = write_config(
        dir.path(),
        "ablate.json",
        serde_json::json!({
            "agent": small_agent(),
            "datasets": [small_recipe(0.5), small_recipe(0.1)],
            "output_dir": out,
            "seeds": [0]
        }),
    );
    let o = offrl(&["ablate", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("comparison.csv"));
    assert_eq!(header, COMPARISON_HEADER);
    let cells: Vec<(String, String)> = rows.iter().map(|r| (r[0].clone(), r[1].clone())).collect();
    for ds in ["er50", "er10"] {
        for v in ["plain", "gp", "cr", "pp"] {
            assert!(cells.contains(&(ds.to_string(), v.to_string())), "missing {ds}/{v}");
        }
    }
    assert_eq!(rows.len(), 8);
}

#[test]
fn sweep_is_sorted_and_zero_matches_plain() {
    let dir = tempfile::tempdir().unwrap();
    let sweep_out = dir.path().join("sweep");
    let cfg = write_config(
        dir.path(),
        "sweep.json",
        serde_json::json!({
            "agent": small_agent(),
            "dataset": small_recipe(0.5),
            "output_dir": sweep_out,
            "seeds": [2]
        }),
    );
    let o = offrl(&["sweep", &cfg, "--values", "1,0,0.1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&sweep_out.join("sweep.csv"));
    assert_eq!(header, SWEEP_HEADER);
    let values: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(values, [0.0, 0.1, 1.0]);

    let plain_out = dir.path().join("plain");
    let cfg = write_config(
        dir.path(),
        "plain.json",
        serde_json::json!({
            "agent": small_agent(),
            "dataset": small_recipe(0.5),
            "output_dir": plain_out,
            "seeds": [2]
        }),
    );
    assert!(offrl(&["train", &cfg]).status.success());
    for f in ["metrics.csv", "train_metrics.csv", "checkpoint_final.json"] {
        assert_eq!(
            fs::read(plain_out.join("seed_2").join(f)).unwrap(),
            fs::read(sweep_out.join("lambda_0").join("seed_2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_json = dir.path().join("bad.json");
    fs::write(&bad_json, "{ not json").unwrap();
    assert_eq!(offrl(&["train", bad_json.to_str().unwrap()]).status.code(), Some(2));

    let unknown = write_config(
        dir.path(),
        "unknown.json",
        serde_json::json!({"agent": {"learning_rate": 1.0}, "output_dir": dir.path().join("x")}),
    );
    assert_eq!(offrl(&["train", &unknown]).status.code(), Some(2));

    let bad_value = write_config(
        dir.path(),
        "bad_value.json",
        serde_json::json!({"agent": {"gamma": 1.5}, "dataset": {"name": "er50"}, "output_dir": dir.path().join("y")}),
    );
    assert_eq!(offrl(&["train", &bad_value]).status.code(), Some(2));

    let missing_data = write_config(
        dir.path(),
        "missing.json",
        serde_json::json!({"dataset": {"path": dir.path().join("nope.jsonl")}, "output_dir": dir.path().join("z")}),
    );
    assert_eq!(offrl(&["train", &missing_data]).status.code(), Some(3));
    assert_eq!(offrl(&["train", dir.path().join("absent.json").to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(offrl(&["dataset", "--env", "cartpole"]).status.code(), Some(2));
}
