use std::path::Path;
use std::process::{Command, Output};

fn sphereloss(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sphereloss"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SPHERELOSS_OUT")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn flops_with_defaults_writes_stamped_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = sphereloss(&["flops", "--seed", "4", "--out", "f"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("f/flops.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    assert!(first.starts_with("# config_hash=") && first.ends_with(" seed=4"), "{first}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("f/flops.json")).unwrap()).unwrap();
    assert_eq!(json["flops_total"], 2 * json["macs_total"].as_u64().unwrap());
}

#[test]
fn seed_required_without_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = sphereloss(&["flops"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--seed"), "{}", stderr(&o));
}

#[test]
fn config_kind_must_match_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"kind": "flops", "seed": 1}"#).unwrap();
    let o = sphereloss(&["train", "--config", "c.json"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("`flops`"), "{}", stderr(&o));
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"kind": "flops", "seed": 1, "typo": 2}"#).unwrap();
    let o = sphereloss(&["flops", "--config", "c.json"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("typo"), "{}", stderr(&o));
}

#[test]
fn config_paths_resolve_against_config_dir() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("cfg");
    std::fs::create_dir(&sub).unwrap();
    let arch = r#"{"input_shape": {"h": 28, "w": 28, "c": 1},
        "layers": [{"operator": "Conv3x3", "c": 8, "s": 2},
                   {"operator": "LinearGDConv7x7", "c": 8},
                   {"operator": "LinearConv1x1", "c": 4}],
        "use_cbam": false}"#;
    std::fs::write(sub.join("arch.json"), arch).unwrap();
    std::fs::write(
        sub.join("c.json"),
        r#"{"kind": "flops", "seed": 2, "arch": "arch.json", "out": "results"}"#,
    )
    .unwrap();
    let o = sphereloss(&["flops", "--config", "cfg/c.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(sub.join("results/flops.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn seed_flag_overrides_config_and_changes_hash() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"kind": "logit-curves", "seed": 1, "points": 5}"#).unwrap();
    let a = sphereloss(&["logit-curves", "--config", "c.json", "--out", "a"], dir.path());
    let b = sphereloss(&["logit-curves", "--config", "c.json", "--out", "b", "--seed", "9"], dir.path());
    assert!(a.status.success() && b.status.success());
    let name = "logit_li-arcface_m0.4_s64.csv";
    let ha = std::fs::read_to_string(dir.path().join("a").join(name)).unwrap();
    let hb = std::fs::read_to_string(dir.path().join("b").join(name)).unwrap();
    assert!(hb.lines().next().unwrap().ends_with("seed=9"));
    assert_ne!(ha.lines().next(), hb.lines().next());
    assert_eq!(ha.lines().skip(1).collect::<Vec<_>>(), hb.lines().skip(1).collect::<Vec<_>>());
}

#[test]
fn train_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"{"kind": "train", "seed": 3, "steps": 20,
        "loss": {"variant": "cosface", "m": 0.35},
        "data": {"type": "sphere", "classes": 5, "dim": 4, "samples_per_class": 8, "noise_sigma": 0.1},
        "model": {"type": "dense", "hidden": 8, "embedding": 8},
        "optim": {"batch_size": 16},
        "verify": {"every": 10, "held_out_per_class": 4, "pairs": 20, "folds": 4}}"#;
    std::fs::write(dir.path().join("c.json"), config).unwrap();
    let o = sphereloss(&["train", "--config", "c.json", "--out", "runs/one"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_sphereloss"))
        .args(["report"])
        .current_dir(dir.path())
        .env("SPHERELOSS_OUT", "runs")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = String::from_utf8(o.stdout).unwrap();
    let written = std::fs::read_to_string(dir.path().join("runs/comparison.csv")).unwrap();
    assert_eq!(printed, written);
    let row = written.lines().nth(2).unwrap();
    assert!(row.starts_with("cosface-m0.35-s64-seed3,train,cosface,0.35,64,3,20,false,"), "{row}");
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = sphereloss(&["report", "--out", "."], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no run summaries"), "{}", stderr(&o));
}
