use std::path::Path;
use std::process::{Command, Output};

use emformer::features::{decode, encode, read_features};
use emformer::{DType, Matrix, ModelConfig};
use serde_json::Value;

fn emformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emformer"))
        .args(args)
        .output()
        .expect("spawn emformer")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("bad json ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn write_config(dir: &Path, name: &str, cfg: &ModelConfig) -> String {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        left_frames: 2,
        center_frames: 2,
        right_frames: 1,
        memory_size: 1,
        dtype: DType::F64,
        ..ModelConfig::default()
    }
}

#[test]
fn latency_reports_eil() {
    let dir = tempfile::tempdir().unwrap();
    for ((c, r), want) in [((32, 8), 960.0), ((16, 8), 640.0), ((2, 1), 80.0)] {
        let cfg = ModelConfig {
            center_frames: c,
            right_frames: r,
            ..ModelConfig::default()
        };
        let out = emformer(&[
            "latency",
            "--config",
            &write_config(dir.path(), "c.json", &cfg),
        ]);
        assert!(out.status.success());
        let v = json(&out);
        assert_eq!(v["eil_ms"], want);
        assert_eq!(v["frame_latency_min_ms"], r as f64 * 40.0);
        assert_eq!(v["frame_latency_max_ms"], (r + c) as f64 * 40.0);
    }
}

#[test]
fn flops_reports_low_latency_saving() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ll.json", &ModelConfig::low_latency());
    let out = emformer(&["flops", "--config", &cfg]);
    assert!(out.status.success());
    let v = json(&out);
    assert!(v["savings_ratio"].as_f64().unwrap() > 0.91);
    assert!(
        v["amtrf"]["total_flops"].as_u64().unwrap()
            > v["emformer"]["total_flops"].as_u64().unwrap()
    );
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "good.json", &tiny());
    let out = emformer(&["validate", "--config", &good]);
    assert!(out.status.success());
    assert_eq!(json(&out)["valid"], true);

    let bad_path = dir.path().join("bad.json");
    std::fs::write(&bad_path, r#"{"d_model": 10, "n_heads": 4}"#).unwrap();
    let out = emformer(&["validate", "--config", bad_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let v = json(&out);
    assert_eq!(v["valid"], false);
    assert!(v["violations"][0].as_str().unwrap().contains("divisible"));

    std::fs::write(&bad_path, r#"{"d_model": 8, "typo": 1}"#).unwrap();
    let out = emformer(&["validate", "--config", bad_path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = emformer(&["latency", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
}

#[test]
fn verify_suite_passes_and_is_sorted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.json", &tiny());
    let out = emformer(&["verify", "--config", &cfg, "--seed", "5", "--probes", "10"]);
    let v = json(&out);
    assert!(out.status.success(), "{v}");
    assert_eq!(v["pass"], true);
    let reports = v["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 7);
    for r in reports {
        let keys: Vec<&String> = r.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["details", "metric", "name", "pass", "tolerance"]);
    }
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let again = emformer(&["verify", "--config", &cfg, "--seed", "5", "--probes", "10"]);
    let strip = |v: &Value| -> Vec<(Value, Value)> {
        v["reports"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| (r["name"].clone(), r["metric"].clone()))
            .collect()
    };
    assert_eq!(
        strip(&json(&again)),
        strip(&serde_json::from_str(&text).unwrap())
    );
}

#[test]
fn verify_rejects_unknown_check() {
    let out = emformer(&["verify", "--seed", "1", "--checks", "equivalence,bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn bench_reports_timing_and_flops() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.json", &tiny());
    for mode in ["parallel", "amtrf-sequential", "emformer-stream"] {
        let out = emformer(&[
            "bench",
            "--config",
            &cfg,
            "--seed",
            "1",
            "--frames",
            "24",
            "--repeats",
            "3",
            "--mode",
            mode,
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let v = json(&out);
        assert!(
            v["throughput"]["details"]["median_seconds"]
                .as_f64()
                .unwrap()
                >= 0.0
        );
        assert!(
            v["throughput"]["details"]["counted_flops"]
                .as_u64()
                .unwrap()
                > 0
        );
        assert!(
            v["flops_per_segment"]["emformer"]["total_flops"]
                .as_u64()
                .unwrap()
                > 0
        );
    }
}

#[test]
fn run_parallel_and_stream_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "t.json",
        &ModelConfig {
            d_model: 16,
            ..tiny()
        },
    );
    // 23 raw frames of width 4, stacked by 4 into 5 frames of width 16.
    let raw = Matrix::from_fn(23, 4, |r, c| ((r * 7 + c * 3) % 11) as f64 / 5.0 - 1.0);
    let input = dir.path().join("in.emf");
    std::fs::write(&input, encode(&raw).unwrap()).unwrap();
    let mut outputs = Vec::new();
    for mode in ["parallel", "stream", "amtrf"] {
        let output = dir.path().join(format!("{mode}.emf"));
        let out = emformer(&[
            "run",
            "--config",
            &cfg,
            "--seed",
            "9",
            "--input",
            input.to_str().unwrap(),
            "--output",
            output.to_str().unwrap(),
            "--mode",
            mode,
            "--stack",
            "4",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(json(&out)["encoder_frames"], 5);
        let data = read_features(&output).unwrap();
        assert_eq!(data.shape(), (5, 16));
        assert_eq!(data.dtype(), DType::F64);
        outputs.push(output);
    }
    assert_eq!(
        std::fs::read(&outputs[0]).unwrap(),
        std::fs::read(&outputs[1]).unwrap()
    );
    let cmp = emformer(&[
        "compare",
        outputs[0].to_str().unwrap(),
        outputs[1].to_str().unwrap(),
    ]);
    assert!(cmp.status.success());
    let v = json(&cmp);
    assert_eq!(v["max_abs_diff"], 0.0);
    assert_eq!(v["bitwise_equal"], true);
    let cmp = emformer(&[
        "compare",
        outputs[0].to_str().unwrap(),
        outputs[2].to_str().unwrap(),
    ]);
    assert_eq!(cmp.status.code(), Some(1));
    assert!(json(&cmp)["max_abs_diff"].as_f64().unwrap() > 0.0);
}

#[test]
fn run_rejects_bad_input_without_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.json", &tiny());
    let input = dir.path().join("bad.emf");
    let mut bytes = encode(&Matrix::<f32>::zeros(4, 8)).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(decode(&bytes).is_err());
    std::fs::write(&input, &bytes).unwrap();
    let output = dir.path().join("out.emf");
    let args = |inp: &Path| {
        emformer(&[
            "run",
            "--config",
            &cfg,
            "--seed",
            "1",
            "--input",
            inp.to_str().unwrap(),
            "--output",
            output.to_str().unwrap(),
            "--mode",
            "parallel",
        ])
    };
    let out = args(&input);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("payload"));
    assert!(!output.exists());

    // Width mismatch with d_model.
    std::fs::write(&input, encode(&Matrix::<f32>::zeros(4, 6)).unwrap()).unwrap();
    assert!(!args(&input).status.success());
    assert!(!output.exists());

    assert!(!args(&dir.path().join("missing.emf")).status.success());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
}
