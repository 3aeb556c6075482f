#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TREC: [&str; 6] = ["Abbreviation", "Entity", "Description and abstract concept", "Human being", "Location", "Numeric value"];

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        let ws = Workspace { dir: tempfile::tempdir().unwrap() };
        let lines: String = (0..160)
            .map(|i| format!("{{\"id\": \"q{i:03}\", \"text\": \"Question number {i} ?\", \"label\": \"{}\"}}\n", TREC[i % 6]))
            .collect();
        fs::write(ws.path("data.jsonl"), lines).unwrap();
        ws.write_mock("mock.json", 0.3);
        ws
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write_mock(&self, name: &str, dirichlet: f64) -> PathBuf {
        let spec = serde_json::json!({
            "seed": 7,
            "rule": {
                "true_label_weight": 2.0,
                "noise_weight": 1.0,
                "label_mass": 0.9,
                "dirichlet_bias": {"strength": dirichlet, "concentration": 5.0}
            }
        });
        let p = self.path(name);
        fs::write(&p, spec.to_string()).unwrap();
        p
    }

    pub fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_indiscal"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("SOURCE_DATE_EPOCH")
            .output()
            .unwrap()
    }

    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    /// `evaluate` with the shared dataset and mock backend.
    pub fn evaluate(&self, out: &str, extra: &[&str]) -> String {
        let mut args = vec!["evaluate", "--dataset", "data.jsonl", "--backend", "mock:mock.json", "--out", out];
        args.extend_from_slice(extra);
        self.ok(&args)
    }

    pub fn json(&self, name: &str) -> serde_json::Value {
        read_json(&self.path(name))
    }
}

pub fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

pub fn error_doc(out: &Output) -> serde_json::Value {
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap()
}
