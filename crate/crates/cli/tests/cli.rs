use std::fs;
use std::path::{Path, PathBuf};
use std::process::Output;

use serde_json::Value;

mod support;

use support::{assert_valid, checkpoint_header, ok, read_json, s, trimlab, validate_history, validate_tree};

const TINY: &str = r#"{
  "task": {"train_size": 48, "val_size": 16, "test_size": 16, "clip_len": 800},
  "model": {"kind": "conv_t", "conv_channels": [8, 12, 12, 16], "head_hidden": 16},
  "train": {"steps": 40, "eval_every": 20, "batch_size": 8, "lr": 0.02},
  "sparsity": {"lambda": 2.0, "t": 0.3},
  "sweep": {"t_grid": [0.3, 0.7], "targets": [0.25]},
  "bench": {"warmup": 1, "reps": 3}
}"#;

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Pipeline {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("cfg.json");
        fs::write(&config, TINY).unwrap();
        Self { _dir: dir, root, config }
    }

    fn run(&self, out: &str, args: &[&str]) -> (PathBuf, Output) {
        self.run_with(&self.config, out, args)
    }

    fn run_with(&self, config: &Path, out: &str, args: &[&str]) -> (PathBuf, Output) {
        let dir = self.root.join("out").join(out);
        let mut all = vec!["--config", s(config), "--out", s(&dir)];
        all.extend_from_slice(args);
        let o = ok(&all);
        (dir, o)
    }
}

#[test]
fn full_pipeline_emits_valid_artifacts() {
    let p = Pipeline::new();
    let (pre, _) = p.run("pre", &["pretrain"]);
    let enc = pre.join("encoder.ckpt");
    validate_history(&pre.join("history.jsonl"));
    assert_valid("checkpoint_header", &checkpoint_header(&enc));
    assert_valid("run_config", &read_json(&pre.join("config.resolved.json")));

    for (verb, out) in [("probe", "probe"), ("mask-train", "mask"), ("ssf", "ssf")] {
        let (dir, _) = p.run(out, &[verb, "--encoder", s(&enc)]);
        validate_history(&dir.join("history.jsonl"));
        assert_valid("run_metrics", &read_json(&dir.join("metrics.json")));
        assert_valid("checkpoint_header", &checkpoint_header(&dir.join("model.ckpt")));
        assert_valid("run_config", &read_json(&dir.join("config.resolved.json")));
    }

    let masked = p.root.join("out/mask/model.ckpt");
    let (trim, _) = p.run("trim", &["trim", "--masked", s(&masked)]);
    let report = read_json(&trim.join("trim_report.json"));
    assert_valid("trim_report", &report);
    assert_valid("trim_plan", &read_json(&trim.join("trim_plan.json")));
    assert_valid("checkpoint_header", &checkpoint_header(&trim.join("trimmed.ckpt")));
    assert!(report["max_abs_deviation"].as_f64().unwrap() <= 1e-5);

    let (bench, stdout) = p.run("bench", &["bench", "--base", s(&masked), "--trimmed", s(&trim.join("trimmed.ckpt"))]);
    let b = read_json(&bench.join("bench.json"));
    assert_valid("bench", &b);
    assert_valid("cost_report", &b["base"]);
    assert_eq!(b["trimmed"]["params"], report["params_after"]);
    assert_eq!(b["base"]["params"], report["params_before"]);
    let text = String::from_utf8(stdout.stdout).unwrap();
    assert!(text.lines().next().unwrap().starts_with("base, "), "{text}");
    let csv = fs::read_to_string(bench.join("comparison.csv")).unwrap();
    assert!(csv.starts_with("model,params,bytes,size_mo,macs,flops,gflops,gmacs,median_ms,speedup\n"));

    let (scratch, _) = p.run("scratch", &["scratch", "--plan", s(&trim.join("trim_plan.json"))]);
    assert_valid("run_metrics", &read_json(&scratch.join("metrics.json")));

    for ckpt in [masked.clone(), p.root.join("out/ssf/model.ckpt"), trim.join("trimmed.ckpt")] {
        let (ev, _) = p.run("eval", &["eval", "--checkpoint", s(&ckpt), "--split", "val"]);
        assert_valid("eval", &read_json(&ev.join("eval.json")));
    }

    let (sweep, _) = p.run("sweep", &["sweep", "--encoder", s(&enc)]);
    let csv = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "row,t,trim_ratio,metric,params,macs");
    assert_eq!(lines.len(), 4, "{csv}");
    assert!(lines[3].starts_with("target_0.25,"));
    for t in ["t_0.30", "t_0.70"] {
        assert_valid("run_metrics", &read_json(&sweep.join(t).join("metrics.json")));
    }

    let (checked, errors) = validate_tree(&p.root.join("out"));
    assert!(errors.is_empty(), "{errors:?}");
    assert!(checked > 30, "{checked}");

    let (wav, _) = p.run("wav", &["export-wav", "--count", "2"]);
    for i in 0..2 {
        let bytes = fs::read(wav.join(format!("train_{i:05}.wav"))).unwrap();
        assert_eq!(&bytes[..4], b"RIFF");
    }
}

#[test]
fn rerunning_the_resolved_config_is_bitwise_identical() {
    let p = Pipeline::new();
    let (pre, _) = p.run("pre", &["pretrain"]);
    let (pre2, _) = p.run_with(&pre.join("config.resolved.json"), "pre2", &["pretrain"]);
    assert_eq!(fs::read(pre.join("encoder.ckpt")).unwrap(), fs::read(pre2.join("encoder.ckpt")).unwrap());
    assert_eq!(fs::read(pre.join("history.jsonl")).unwrap(), fs::read(pre2.join("history.jsonl")).unwrap());

    let enc = pre.join("encoder.ckpt");
    let (a, _) = p.run("a", &["mask-train", "--encoder", s(&enc)]);
    let resolved = a.join("config.resolved.json");
    let (b, _) = p.run_with(&resolved, "b", &["mask-train", "--encoder", s(&enc)]);
    for f in ["history.jsonl", "model.ckpt", "metrics.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn precision_flag_selects_double() {
    let p = Pipeline::new();
    let (pre, _) = p.run("pre", &["--precision", "f64", "pretrain"]);
    let header = checkpoint_header(&pre.join("encoder.ckpt"));
    assert_eq!(header["meta"]["precision"], "f64");
    assert_eq!(read_json(&pre.join("config.resolved.json"))["precision"], "f64");
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let p = Pipeline::new();
    assert_eq!(trimlab(&["--no-such-flag", "pretrain"]).status.code(), Some(2));

    let bad = p.root.join("bad.json");
    fs::write(&bad, r#"{"train": {"stepz": 3}}"#).unwrap();
    let out = trimlab(&["--config", s(&bad), "--out", s(&p.root.join("x")), "pretrain"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.stepz"));

    let invalid = p.root.join("invalid.json");
    fs::write(&invalid, r#"{"train": {"steps": 0}}"#).unwrap();
    assert_eq!(trimlab(&["--config", s(&invalid), "--out", s(&p.root.join("y")), "pretrain"]).status.code(), Some(2));

    let missing = trimlab(&["--config", s(&p.config), "--out", s(&p.root.join("z")), "probe", "--encoder", s(&p.root.join("nope.ckpt"))]);
    assert_eq!(missing.status.code(), Some(1));

    let diverge = p.root.join("diverge.json");
    let mut cfg: Value = serde_json::from_str(TINY).unwrap();
    cfg["train"]["lr"] = Value::from(1e30);
    fs::write(&diverge, cfg.to_string()).unwrap();
    let out = trimlab(&["--config", s(&diverge), "--out", s(&p.root.join("d")), "pretrain"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn encoder_from_another_architecture_is_a_config_error() {
    let p = Pipeline::new();
    let (pre, _) = p.run("pre", &["pretrain"]);
    let other = p.root.join("other.json");
    let mut cfg: Value = serde_json::from_str(TINY).unwrap();
    cfg["model"]["conv_channels"] = serde_json::json!([8, 8, 8, 8]);
    fs::write(&other, cfg.to_string()).unwrap();
    let out = trimlab(&["--config", s(&other), "--out", s(&p.root.join("o")), "probe", "--encoder", s(&pre.join("encoder.ckpt"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
