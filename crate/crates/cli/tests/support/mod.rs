//! Helpers shared by the binary-level tests.
#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

pub fn trimlab(args: &[&str]) -> Output {
    trimlab_env(args, &[])
}

pub fn trimlab_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_trimlab"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = trimlab(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/schemas").join(format!("{name}.schema.json"));
    let doc: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    jsonschema::validator_for(&doc).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Schema violations of `doc`, formatted with their instance paths.
pub fn violations(name: &str, doc: &Value) -> Vec<String> {
    schema(name).iter_errors(doc).map(|e| format!("{name}: {e} at {}", e.instance_path)).collect()
}

pub fn assert_valid(name: &str, doc: &Value) {
    let errors = violations(name, doc);
    assert!(errors.is_empty(), "{errors:?}");
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

pub fn checkpoint_header(path: &Path) -> Value {
    let bytes = fs::read(path).unwrap();
    assert_eq!(&bytes[..8], b"TRIMLAB1");
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    serde_json::from_slice(&bytes[16..16 + n]).unwrap()
}

/// Schema for an emitted file, keyed by its name.
pub fn schema_for(file: &str) -> Option<&'static str> {
    Some(match file {
        "config.resolved.json" => "run_config",
        "history.jsonl" => "history_record",
        "metrics.json" => "run_metrics",
        "trim_report.json" => "trim_report",
        "trim_plan.json" => "trim_plan",
        "bench.json" => "bench",
        "eval.json" => "eval",
        f if f.ends_with(".ckpt") => "checkpoint_header",
        _ => return None,
    })
}

/// Validates every JSON document, JSONL line and checkpoint header under
/// `dir`; returns the number of documents checked and any violations.
pub fn validate_tree(dir: &Path) -> (usize, Vec<String>) {
    let (mut n, mut errors) = (0, Vec::new());
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let name = path.file_name().unwrap().to_str().unwrap().to_string();
            let Some(schema) = schema_for(&name) else {
                if name.ends_with(".json") || name.ends_with(".jsonl") {
                    errors.push(format!("no schema for {}", path.display()));
                }
                continue;
            };
            let docs: Vec<Value> = if name.ends_with(".ckpt") {
                vec![checkpoint_header(&path)]
            } else if name.ends_with(".jsonl") {
                fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
            } else {
                vec![read_json(&path)]
            };
            for doc in &docs {
                errors.extend(violations(schema, doc).into_iter().map(|e| format!("{}: {e}", path.display())));
            }
            n += docs.len();
        }
    }
    (n, errors)
}

pub fn validate_history(path: &Path) {
    let text = fs::read_to_string(path).unwrap();
    assert!(!text.is_empty());
    for line in text.lines() {
        assert_valid("history_record", &serde_json::from_str(line).unwrap());
    }
}
