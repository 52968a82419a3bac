use std::path::Path;
use std::process::Command;

use serde_json::Value;

const SMALL: &str = r#"
[world]
subjects = 40
value_pool = 24
predicates = 6
min_degree = 2
max_degree = 6

[lm]
context = 64

[pretrain]
epochs = 1
textified_per_subject = 1
listed_per_subject = 1
followups = 2
pseudo_subjects = 20

[cf]
n_vectors = 2
hidden = 16

[stage1]
max_epochs = 1

[stage2]
max_epochs = 1
"#;

fn run(out: &Path, config: &Path, args: &[&str]) -> String {
    let output = Command::new(env!("CARGO_BIN_EXE_conceptformer"))
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn small_run_through_every_command() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.toml");
    std::fs::write(&config, SMALL).unwrap();
    let out = tmp.path().join("run");
    run(&out, &config, &["gen-world"]);
    run(&out, &config, &["pretrain-lm"]);
    run(&out, &config, &["train-cf"]);
    for mode in ["baseline", "rag", "cf"] {
        run(&out, &config, &["eval", "--mode", mode]);
    }
    let live = json(out.join("eval/cf-2_stage2_test.json"));
    run(&out, &config, &["build-table"]);
    let table = out.join("tables/concepts_n2.cflt");
    run(&out, &config, &["eval", "--mode", "cf", "--table", table.to_str().unwrap()]);
    let from_table = json(out.join("eval/cf-2_stage2_test.json"));
    assert_eq!(live["hit_rates"], from_table["hit_rates"]);
    assert_eq!(live["ledger"], from_table["ledger"]);
    assert!(from_table["provenance"]["table_sha256"].is_string());

    let text = run(&out, &config, &["report"]);
    assert!(text.contains("token efficiency"));
    let cmp = json(out.join("report/comparison.json"));
    assert!(cmp.is_object());

    let sidecar = json(out.join("cf/cf_n2_stage2.json"));
    assert_eq!(sidecar["report"]["lm_fingerprint_before"], sidecar["report"]["lm_fingerprint_after"]);
    let prov = json(out.join("eval/provenance_eval-rag_stage2_test.json"));
    assert_eq!(prov["command"], "eval-rag_stage2_test");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    std::fs::write(&config, "[world]\nsubjcts = 4\n").unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_conceptformer"))
        .arg("--out")
        .arg(tmp.path().join("run"))
        .arg("--config")
        .arg(&config)
        .arg("gen-world")
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("subjcts"));
}
