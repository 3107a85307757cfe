use std::path::Path;
use std::process::Command;

use nesyaug::config::ExperimentConfig;
use nesyaug::experiment::run_experiment;
use nesyaug::ledger::{RunLedger, Stage, LEDGER_FILE};
use nesyaug::{exit_code, Failure};

const BIN: &str = env!("CARGO_BIN_EXE_nesyaug");

const TINY: &str = r#"
name = "smoke"
scenarios = ["augmentation", "synthetic_only"]
seeds = [3]
real_size = 40
synthetic_size = 12
test_size = 20
generators = ["baseline", "2"]

[generator]
train_steps = 10
sample_steps = 4

[sgg]
epochs = 2

[detector]
kind = "oracle"
"#;

fn config_error(text: &str) -> String {
    match ExperimentConfig::from_toml(text) {
        Err(Failure::Config(m)) => m,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn config_defaults_and_validation() {
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    assert_eq!(cfg.generator.train_steps, 10);
    assert_eq!(cfg.generator.guidance, 2.0);
    assert_eq!(cfg.sgg.hyper.epochs, 2);

    let replace = |from: &str, to: &str| TINY.replace(from, to);
    assert!(config_error(&replace("seeds = [3]", "seeds = []")).contains("seeds"));
    assert!(config_error(&replace("seeds = [3]", "seeds = [3, 3]")).contains("distinct"));
    assert!(config_error(&replace("test_size = 20", "test_size = 0")).contains("positive"));
    assert!(config_error(&replace("\"2\"]", "\"7\"]")).contains("7"));
    assert!(config_error(&replace("\"2\"]", "\"baseline\"]")).contains("distinct"));
    assert!(config_error(&replace("name = \"smoke\"", "name = \"a b\"")).contains("name"));
    assert!(config_error(&format!("surprise = 1\n{TINY}")).contains("surprise"));
    let uneven = format!("{TINY}\n[synthetic_sizes]\nbaseline = 12\n\"2\" = 13\n");
    assert!(config_error(&uneven).contains("equal"), "{}", config_error(&uneven));
    assert!(config_error(&replace("sample_steps = 4", "sample_steps = 0")).contains("sample_steps"));
}

#[test]
fn completed_stages_are_cached_and_failures_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let mut ledger = RunLedger::open(dir.path()).unwrap();
    let runs = std::cell::Cell::new(0);
    let params = serde_json::json!({"n": 1});
    let stage = |name: &str, inputs: Vec<String>| Stage {
        name: name.into(),
        seed: 0,
        params: &params,
        inputs,
    };
    let write = |d: &Path| {
        runs.set(runs.get() + 1);
        std::fs::write(d.join("a.txt"), "a")?;
        Ok(())
    };
    let a = ledger.run(stage("a", vec![]), write).unwrap();
    ledger.run(stage("a", vec![]), write).unwrap();
    assert_eq!(runs.get(), 1);
    // tampering with an output invalidates the cache entry
    std::fs::write(a.join("a.txt"), "b").unwrap();
    ledger.run(stage("a", vec![]), write).unwrap();
    assert_eq!(runs.get(), 2);

    ledger
        .run(stage("b", vec!["a".into()]), |d| Ok(std::fs::write(d.join("b.txt"), "b")?))
        .unwrap();
    let err = ledger
        .run(stage("c", vec!["b".into()]), |_| anyhow::bail!("boom"))
        .unwrap_err();
    assert_eq!(exit_code(&err), 3);
    let err = ledger.run(stage("d", vec!["c".into()]), |_| Ok(())).unwrap_err();
    assert!(err.to_string().contains("has not completed"));

    let reopened = RunLedger::open(dir.path()).unwrap();
    assert_eq!(reopened.stages.len(), 3);
    assert_eq!(reopened.get("c").unwrap().error.as_deref(), Some("boom"));
    assert!(reopened.unreachable_files().unwrap().is_empty());
    assert!(dir.path().join(LEDGER_FILE).exists());
}

#[test]
fn smoke_experiment_writes_every_table_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    let first = run_experiment(&cfg, dir.path()).unwrap();
    for table in ["table1", "table2", "table3", "table3_predicates"] {
        for ext in ["md", "csv"] {
            let p = first.report_dir.join(format!("{table}.{ext}"));
            assert!(p.exists(), "{} missing", p.display());
        }
    }
    let table1 = std::fs::read_to_string(first.report_dir.join("table1.md")).unwrap();
    assert!(table1.contains("Real dataset"), "{table1}");
    assert!(first.ledger.unreachable_files().unwrap().is_empty());
    let aug = first.scenario(nesyaug::config::Scenario::Augmentation).unwrap();
    assert_eq!(aug.per_seed[&3].len(), 3);

    let before = std::fs::read(dir.path().join(LEDGER_FILE)).unwrap();
    let second = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(std::fs::read(dir.path().join(LEDGER_FILE)).unwrap(), before, "second run redid work");
    assert_eq!(first.scenarios, second.scenarios);
}

fn nesyaug(args: &[&str], out_env: Option<&Path>) -> std::process::Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    match out_env {
        Some(p) => cmd.env(nesyaug::OUT_ENV, p),
        None => cmd.env_remove(nesyaug::OUT_ENV),
    };
    cmd.output().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, TINY.replace("seeds = [3]", "seeds = []")).unwrap();
    let out = nesyaug(&["experiment", "run", bad.to_str().unwrap()], Some(dir.path()));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeds"));

    assert_eq!(nesyaug(&["frobnicate"], None).status.code(), Some(2));

    let missing = dir.path().join("missing");
    let out = nesyaug(
        &["filter", "--input", missing.to_str().unwrap(), "--out", dir.path().join("f").to_str().unwrap()],
        None,
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stage_verbs_chain_and_output_root_follows_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let ok = |args: &[&str]| {
        let out = nesyaug(args, None);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["world", "gen", "--n", "30", "--seed", "1", "--out", &p("real")]);
    ok(&["filter", "--input", &p("real"), "--out", &p("filtered")]);
    ok(&["train-gen", "--data", &p("filtered"), "--generator", "1", "--out", &p("gen"), "--steps", "3"]);
    ok(&["sample", "--model", &p("gen"), "--n", "4", "--steps", "3", "--out", &p("synth")]);
    ok(&["extract", "--input", &p("synth"), "--out", &p("ext"), "--detector", "oracle"]);
    ok(&["world", "gen", "--n", "10", "--seed", "2", "--out", &p("test")]);
    ok(&["train-sgg", "--data", &p("filtered"), "--data", &format!("{}:2", p("ext")), "--out", &p("sgg"), "--epochs", "1"]);
    ok(&["eval", "--model", &p("sgg"), "--test", &p("test"), "--out", &p("eval"), "--name", "mixed"]);
    ok(&["report", &format!("{}/report.json", p("eval")), "--out", &p("tables")]);
    assert!(dir.path().join("tables").read_dir().unwrap().count() > 0);

    let cfg = dir.path().join("cfg.toml");
    let root = dir.path().join("root");
    // a config error is reported before anything is written
    std::fs::write(&cfg, TINY.replace("seeds = [3]", "seeds = []")).unwrap();
    let out = nesyaug(&["experiment", "run", cfg.to_str().unwrap()], Some(&root));
    assert_eq!(out.status.code(), Some(2));
    assert!(!root.join("smoke").exists());
    std::fs::write(&cfg, TINY.replace("[\"augmentation\", \"synthetic_only\"]", "[\"augmentation\"]")).unwrap();
    let out = nesyaug(&["experiment", "run", cfg.to_str().unwrap()], Some(&root));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("smoke").join(LEDGER_FILE).exists());
}
