mod common;

use std::process::Command;

use backdoor_prune::par::with_jobs;
use backdoor_prune::pipeline::*;
use common::{canonical_report, small_config, snapshot};

const BIN: &str = env!("CARGO_BIN_EXE_backdoor-prune");

fn assert_same_artifacts(a: &std::collections::BTreeMap<String, Vec<u8>>, b: &std::collections::BTreeMap<String, Vec<u8>>) {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in a {
        if name.ends_with("report.json") {
            assert_eq!(canonical_report(bytes), canonical_report(&b[name]), "{name}");
        } else {
            assert!(*bytes == b[name], "{name} differs");
        }
    }
}

#[test]
fn full_run_is_reproducible_across_worker_counts() {
    for budget in [Budget::PerClass(2), Budget::DataFree] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), budget);
        let first = with_jobs(Some(1), || cmd_full(&cfg, true, true).unwrap());
        let before = snapshot(dir.path());
        let second = with_jobs(Some(3), || cmd_full(&cfg, true, true).unwrap());
        assert_eq!(first.canonical_json().unwrap(), second.canonical_json().unwrap());
        assert_same_artifacts(&before, &snapshot(dir.path()));
        assert!(first.mitigated);
        assert!(before.contains_key("mitigate/pruning_curve.csv"));
        if budget == Budget::DataFree {
            assert!(before.contains_key("recovered/manifest.json"));
            assert!(before.contains_key("shapley/acc.json"));
        }
    }
}

#[test]
fn staged_commands_match_the_full_run() {
    let full_dir = tempfile::tempdir().unwrap();
    let full = cmd_full(&small_config(full_dir.path(), Budget::PerClass(2)), true, false).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), Budget::PerClass(2));
    let layout = Layout::new(dir.path());
    cmd_attack(&cfg).unwrap();
    let norms = cmd_reverse(&cfg, &layout.model()).unwrap();
    assert_eq!(norms, full.detection.norms);
    let detection = cmd_detect(&cfg, &layout.norms()).unwrap();
    assert_eq!(detection, full.detection);
    cmd_shapley(&cfg, &layout.model(), &layout.triggers(), &layout.detection()).unwrap();
    let staged = cmd_mitigate(&cfg, &layout.model(), &layout.tables(), &layout.detection(), false).unwrap();
    assert_eq!(staged.pruned, full.pruned);
    assert_eq!(staged.acc_after, full.acc_after);
    assert_eq!(staged.asr_after, full.asr_after);
    for f in ["shapley/asr.json", "mitigate/model.ckpt", "reverse/norms.json"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(full_dir.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn cli_prints_a_loadable_config() {
    let out = Command::new(BIN).args(["config", "--budget", "datafree", "--iterations", "7"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg: PipelineConfig = toml::from_str(&text).unwrap();
    assert_eq!(cfg.budget, Budget::DataFree);
    assert_eq!(cfg.shapley.iterations, 7);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, &text).unwrap();
    let again = Command::new(BIN).arg("config").arg("-c").arg(&path).output().unwrap();
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn cli_reports_the_failing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .arg("reverse")
        .arg("--out")
        .arg(dir.path())
        .arg("--checkpoint")
        .arg(dir.path().join("missing.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: reverse:"), "{err}");
    assert!(err.contains("missing.ckpt"), "{err}");

    let out = Command::new(BIN).args(["config", "--budget", "lots"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: config:"));
}

#[test]
fn cli_full_run_exits_with_mitigation_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), Budget::PerClass(2));
    let path = dir.path().join("c.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let out = Command::new(BIN).arg("full").arg("--force").arg("-c").arg(&path).output().unwrap();
    let report: MitigationReport =
        serde_json::from_slice(&std::fs::read(dir.path().join("mitigate/report.json")).unwrap()).unwrap();
    let expected = if report.detection.is_poisoned() { 2 } else { 0 };
    assert_eq!(out.status.code(), Some(expected));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("verdict "));
}
