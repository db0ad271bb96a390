use std::path::Path;
use std::process::{Command, Output};

fn graspladder(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graspladder"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GRASPLADDER_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn gen_data_via_network_matches_in_process() {
    let d = tempfile::tempdir().unwrap();
    ok(&graspladder(&["gen-data", "--regime", "large_jitter", "--count", "8", "--seed", "3", "--out", "a"], d.path()));
    ok(&graspladder(
        &["gen-data", "--regime", "large_jitter", "--count", "8", "--seed", "3", "--out", "b", "--via", "network"],
        d.path(),
    ));
    for sub in ["meta/info.json", "data/shard-00000.jsonl"] {
        assert_eq!(std::fs::read(d.path().join("a").join(sub)).unwrap(), std::fs::read(d.path().join("b").join(sub)).unwrap());
    }
    let stats = ok(&graspladder(&["report", "dataset", "--data", "a"], d.path()));
    assert!(stats.contains("large_jitter"), "{stats}");
}

#[test]
fn zero_count_gives_empty_dataset() {
    let d = tempfile::tempdir().unwrap();
    ok(&graspladder(&["gen-data", "--count", "0", "--out", "empty"], d.path()));
    let ds = graspladder::dataset::read_dataset(&d.path().join("empty"), None, None).unwrap();
    assert!(ds.episodes.is_empty());
}

#[test]
fn eval_reruns_from_manifest_and_self_checks() {
    let d = tempfile::tempdir().unwrap();
    let text = ok(&graspladder(
        &["eval", "--policies", "oracle,shortcut", "--eval-episodes", "10", "--self-check", "--out", "run1"],
        d.path(),
    ));
    assert!(text.contains("self-check: ok"));
    let small = text.find("small_jitter").unwrap();
    let full = text.find("full_random").unwrap();
    assert!(small < full);
    ok(&graspladder(&["eval", "--config", "run1/manifest.json", "--out", "run2"], d.path()));
    assert_eq!(
        std::fs::read(d.path().join("run1/outcomes.ndjson")).unwrap(),
        std::fs::read(d.path().join("run2/outcomes.ndjson")).unwrap()
    );
    assert!(d.path().join("run1/figures/bars_oracle.svg").exists());
}

#[test]
fn self_check_flags_tampered_outcomes() {
    let d = tempfile::tempdir().unwrap();
    ok(&graspladder(&["eval", "--policies", "nearest", "--regimes", "full_random", "--eval-episodes", "5", "--out", "run"], d.path()));
    let log = d.path().join("run/outcomes.ndjson");
    let tampered = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| l.replacen("\"success\":false", "\"success\":true", 1).replacen("\"reach\":true", "\"reach\":false", 1))
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(&log, tampered + "\n").unwrap();
    let out = graspladder(&["report", "outcomes", "--in", "run", "--self-check"], d.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("self-check"));
}

#[test]
fn missing_dataset_names_gen_data() {
    let d = tempfile::tempdir().unwrap();
    let out = graspladder(
        &["eval", "--policies", "bc-blind", "--regimes", "small_jitter", "--no-auto-generate", "--out", "run"],
        d.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("graspladder gen-data"));
}

#[test]
fn figures_with_one_sample() {
    let d = tempfile::tempdir().unwrap();
    ok(&graspladder(&["report", "figures", "--regime", "medium_jitter", "--n", "1", "--out", "figs"], d.path()));
    let csv = std::fs::read_to_string(d.path().join("figs/scatter_medium_jitter.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(d.path().join("figs/scatter_medium_jitter.svg").exists());
    assert!(!graspladder(&["report", "figures", "--n", "0", "--out", "figs"], d.path()).status.success());
}
