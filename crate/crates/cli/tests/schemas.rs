use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn audit_outputs_match_checked_in_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    for (fixture, extra) in [("synthetic", vec![]), ("circle", vec!["holes"])] {
        let out_dir = tmp.path().join(fixture);
        let cfg = root().join(format!("fixtures/{fixture}/config.json"));
        let cmd = if extra.is_empty() { "audit-all" } else { extra[0] };
        let out = Command::new(env!("CARGO_BIN_EXE_atlas"))
            .args([cmd, "--config", cfg.to_str().unwrap(), "--out_dir", out_dir.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let manifest = load(&out_dir.join("manifest.json"));
        let mut names: Vec<String> =
            manifest["sections"].as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect();
        names.push("manifest".into());
        for name in names {
            let schema = load(&root().join(format!("schemas/{name}.schema.json")));
            let validator = jsonschema::validator_for(&schema).unwrap();
            let doc = load(&out_dir.join(format!("{name}.json")));
            let errors: Vec<String> =
                validator.iter_errors(&doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
            assert!(errors.is_empty(), "{fixture}/{name}: {errors:?}");
        }
    }
}

#[test]
fn schemas_reject_a_broken_document() {
    let schema = load(&root().join("schemas/retrieval.schema.json"));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let bad: Value = serde_json::json!({"label_field": "label", "ks": [1], "skipped": [], "reports": [{"dataset": "a", "mode": "nearby"}]});
    assert!(!validator.is_valid(&bad));
}
