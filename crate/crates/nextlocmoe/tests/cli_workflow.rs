//! Drives the CLI end to end: generate a city, train on it, then run every
//! downstream command against the produced artifacts. Error paths go through
//! the compiled binary so exit codes and stderr formatting are covered too.

use std::path::Path;
use std::process::Command;

use nextlocmoe::cli::run_from;

fn cli(args: &[&str]) -> nextlocmoe::Result<()> {
    run_from(std::iter::once("nextlocmoe").chain(args.iter().copied()))
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_MODEL: &str = r#"
[model]
profile = "custom"
d_model = 16
n_heads = 2
n_lower_layers = 1
n_moe_layers = 1
d_ffn = 20
history_len = 4
current_len = 2
prefix_len = 2
func_top_k = 2
func_router_hidden = 10
lora_rank = 2
d_prior = 5
d_fuse = 7
d_text = 12

[model.embed]
spatial = 8
day = 3
hour = 3
duration = 2

[model.tcn]
kernel = 2
dilations = [1]
channels = 6
out_dim = 6

[train]
epochs = 2
batch_size = 8
lr = 1e-3
"#;

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg_path = root.join("small.toml");
    std::fs::write(&cfg_path, SMALL_MODEL).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let data = root.join("city");
    let data_s = data.to_str().unwrap().to_string();

    cli(&[
        "gen-data", "--out", &data_s, "--seed", "9", "--locations", "60", "--users", "10",
        "--days", "10", "--grid", "10",
    ])
    .unwrap();
    for f in ["locations.csv", "records.csv", "records.jsonl", "meta.json", "manifest.json"] {
        assert!(data.join(f).exists(), "gen-data should write {f}");
    }
    let manifest = read_json(&data.join("manifest.json"));
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 9);

    let run = root.join("run");
    let run_s = run.to_str().unwrap().to_string();
    cli(&[
        "train", "--data", &data_s, "--config", cfg, "--out", &run_s, "--seed", "9",
    ])
    .unwrap();
    let report = read_json(&run.join("train_report.json"));
    assert_eq!(report["train_config"]["epochs"], 2);
    assert_eq!(report["report"]["epochs"].as_array().unwrap().len(), 2);
    assert!(run.join("model.ckpt").exists());
    assert!(run.join("train_log.jsonl").exists());
    let ckpt = run.join("model.ckpt");
    let ckpt_s = ckpt.to_str().unwrap().to_string();

    let eval_out = root.join("eval");
    cli(&[
        "eval", "--model", &ckpt_s, "--data", &data_s, "--config", cfg, "--out",
        eval_out.to_str().unwrap(), "--ks", "1,5,10", "--split", "test", "--seed", "9",
    ])
    .unwrap();
    let eval = read_json(&eval_out.join("eval_report.json"));
    let hit = eval["hit_at"].as_object().unwrap();
    assert_eq!(hit.len(), 3);
    for (_, v) in hit {
        let v = v.as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    let pred_out = root.join("pred");
    cli(&[
        "predict", "--model", &ckpt_s, "--data", &data_s, "--config", cfg, "--out",
        pred_out.to_str().unwrap(), "--user", "u0000", "--index", "0", "--top", "5", "--seed", "9",
    ])
    .unwrap();
    let pred = read_json(&pred_out.join("prediction.json"));
    assert_eq!(pred["user"], "u0000");
    assert_eq!(pred["candidates"].as_array().unwrap().len(), 5);
    assert!(pred["pred_denormalized"].is_array());

    let city_b = root.join("city-b");
    let city_b_s = city_b.to_str().unwrap().to_string();
    cli(&[
        "gen-data", "--out", &city_b_s, "--seed", "77", "--locations", "40", "--users", "6",
        "--days", "8", "--grid", "8",
    ])
    .unwrap();
    let tr_out = root.join("transfer");
    cli(&[
        "transfer-eval", "--model", &ckpt_s, "--data", &city_b_s, "--config", cfg, "--out",
        tr_out.to_str().unwrap(), "--ks", "1,5,10", "--seed", "9",
    ])
    .unwrap();
    let tr = read_json(&tr_out.join("transfer_report.json"));
    assert_eq!(tr["random_baseline"]["10"].as_f64().unwrap(), 0.25);
    let tr_manifest = read_json(&tr_out.join("manifest.json"));
    assert_eq!(tr_manifest["model_checksum"], tr["checksum"]);

    let routing_out = root.join("routing");
    cli(&[
        "report-routing", "--model", &ckpt_s, "--data", &data_s, "--config", cfg, "--out",
        routing_out.to_str().unwrap(), "--split", "all", "--seed", "9",
    ])
    .unwrap();
    let act = read_json(&routing_out.join("activation_report.json"));
    let mean = act["mean_activated"].as_f64().unwrap();
    assert!((1.0..=11.0).contains(&mean));
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        cli(&[
            "gen-data", "--out", out.to_str().unwrap(), "--seed", "5", "--locations", "30",
            "--users", "4", "--days", "6", "--grid", "8",
        ])
        .unwrap();
    }
    for f in ["locations.csv", "records.csv", "records.jsonl", "meta.json", "manifest.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs between same-seed runs"
        );
    }
}

#[test]
fn bad_inputs_produce_single_line_errors_and_exit_code_1() {
    let bin = env!("CARGO_BIN_EXE_nextlocmoe");
    let dir = tempfile::tempdir().unwrap();

    // Unknown config key in the section the command actually reads.
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[data]\nn_locs = 4\n").unwrap();
    let out = Command::new(bin)
        .args([
            "gen-data", "--out", dir.path().join("x").to_str().unwrap(), "--config",
            cfg.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "stderr should be a single line: {stderr}");
    assert!(stderr.contains("n_locs"), "error should name the bad key: {stderr}");

    // Missing model checkpoint.
    let out = Command::new(bin)
        .args(["eval", "--model", "/nonexistent/model.ckpt", "--data", "/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Bad CLI flag.
    let out = Command::new(bin).args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Help exits zero.
    let out = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().contains("gen-data"));
}
