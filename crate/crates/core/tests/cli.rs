mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{desk_config, manifest_schema, schema_errors};
use layerlab::runner::{emit_report, run_experiment, Command as Sub, ExperimentConfig, Format};
use rand::seq::SliceRandom;
use rand::Rng;

fn layerlab(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerlab"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn quick(dir: &Path, seed: u64, datasets: usize) -> String {
    desk_config(&dir.join("out"), seed, 5, datasets)
}

#[test]
fn successful_run_exits_zero_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &quick(dir.path(), 1, 1));
    let out = dir.path().join("o");
    let o = layerlab(&["surgery", "--formats", "csv,json"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("records.csv").is_file());
    assert!(out.join("manifest.json").is_file());
    assert!(!out.join("fig_skip.svg").exists());
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let missing = dir.path().join("nope.toml");
    assert_eq!(layerlab(&["report"], &missing, &out).status.code(), Some(1));

    let bogus = write(dir.path(), "bogus.toml", &format!("colour = 3\n{}", quick(dir.path(), 1, 1)));
    assert_eq!(layerlab(&["report"], &bogus, &out).status.code(), Some(1));

    let cfg = write(dir.path(), "c.toml", &quick(dir.path(), 1, 1));
    assert_eq!(layerlab(&["report", "--formats", "csv,pdf"], &cfg, &out).status.code(), Some(1));

    let header_only = write(dir.path(), "empty.csv", "a,b,y\n");
    let text = format!(
        "{}\n[[datasets]]\nkind = \"csv\"\npath = \"{}\"\ntarget = \"y\"\n",
        quick(dir.path(), 1, 1),
        header_only.display()
    );
    let cfg = write(dir.path(), "header.toml", &text);
    let o = layerlab(&["report"], &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty.csv"));
    assert!(!out.exists(), "no report files on a config error");
}

#[test]
fn unsplittable_dataset_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = write(dir.path(), "tiny.csv", "a,y\n1,0\n2,1\n3,0\n4,1\n5,0\n6,1\n");
    let text = format!(
        "{}\n[[datasets]]\nkind = \"csv\"\npath = \"tiny.csv\"\ntarget = \"y\"\n",
        quick(dir.path(), 2, 1)
    );
    let cfg = write(dir.path(), "c.toml", &text);
    let out = dir.path().join("o");
    let o = layerlab(&["early-exit"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tiny"));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["cells"]["failed"].as_u64().unwrap() > 0);
    assert!(manifest["cells"]["completed"].as_u64().unwrap() > 0);
    assert!(schema_errors(&manifest_schema(), &manifest).is_empty());
    drop(tiny);
}

#[test]
fn unwritable_output_is_fatal_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &quick(dir.path(), 3, 1));
    let blocker = write(dir.path(), "file", "");
    let out = blocker.join("sub");
    let o = layerlab(&["surgery"], &cfg, &out);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries.len(), 2, "{entries:?}");
}

#[test]
fn rerun_and_sequential_execution_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let base = quick(dir.path(), 4, 2);
    let par = write(dir.path(), "par.toml", &base);
    let seq = write(dir.path(), "seq.toml", &format!("execution = \"sequential\"\n{base}"));
    let runs = [(&par, "a"), (&par, "b"), (&seq, "c")];
    for (cfg, name) in runs {
        let o = layerlab(&["report", "--formats", "csv"], cfg, &dir.path().join(name));
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = dir.path().join("a");
    let names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(names.len() >= 8);
    for n in &names {
        let bytes = std::fs::read(a.join(n)).unwrap();
        for other in ["b", "c"] {
            assert_eq!(std::fs::read(dir.path().join(other).join(n)).unwrap(), bytes, "{n:?} differs in {other}");
        }
    }
}

#[test]
fn seed_override_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &quick(dir.path(), 5, 1));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(layerlab(&["early-exit", "--formats", "csv"], &cfg, &a).status.code(), Some(0));
    assert_eq!(layerlab(&["early-exit", "--formats", "csv", "--seed", "6"], &cfg, &b).status.code(), Some(0));
    assert_ne!(std::fs::read(a.join("records.csv")).unwrap(), std::fs::read(b.join("records.csv")).unwrap());
}

#[test]
fn manifests_are_schema_valid_across_random_configs() {
    let schema = manifest_schema();
    let mut rng = layerlab::seed::rng(20);
    let all = ["skip", "swap", "repeat", "early-exit", "probe", "cosine"];
    let commands = [Sub::Train, Sub::Surgery, Sub::Probe, Sub::Similarity, Sub::EarlyExit, Sub::Report];
    let dir = tempfile::tempdir().unwrap();
    for i in 0..20 {
        let mut chosen: Vec<&str> = all.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
        if chosen.is_empty() {
            chosen.push("skip");
        }
        chosen.shuffle(&mut rng);
        let list = chosen.iter().map(|s| format!("\"{s}\"")).collect::<Vec<_>>().join(", ");
        let text = format!(
            "interventions = [{list}]\ntie_threshold = {}\n{}",
            rng.gen_range(0.0..1e-3),
            desk_config(&dir.path().join(format!("r{i}")), rng.gen_range(0..=i64::MAX as u64), rng.gen_range(1..4), rng.gen_range(1..3))
        );
        let config = ExperimentConfig::from_toml(&text).unwrap();
        let command = *commands.choose(&mut rng).unwrap();
        let report = run_experiment(&config, command, &|_| {}).unwrap();
        emit_report(&report, &[Format::Json], &config.out_dir).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(config.out_dir.join("manifest.json")).unwrap()).unwrap();
        let errors = schema_errors(&schema, &manifest);
        assert!(errors.is_empty(), "config {i} ({command:?}): {errors:?}");
    }
}

#[test]
fn schema_checker_rejects_broken_manifests() {
    let schema = manifest_schema();
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig::from_toml(&quick(dir.path(), 7, 1)).unwrap();
    let report = run_experiment(&config, Sub::EarlyExit, &|_| {}).unwrap();
    emit_report(&report, &[Format::Json], &config.out_dir).unwrap();
    let good: serde_json::Value = serde_json::from_slice(&std::fs::read(config.out_dir.join("manifest.json")).unwrap()).unwrap();
    assert!(schema_errors(&schema, &good).is_empty());
    let mut bad = good.clone();
    bad.as_object_mut().unwrap().remove("cells");
    assert!(!schema_errors(&schema, &bad).is_empty());
    let mut bad = good.clone();
    bad["command"] = "dance".into();
    assert!(!schema_errors(&schema, &bad).is_empty());
    let mut bad = good;
    bad["extra"] = 1.into();
    assert!(!schema_errors(&schema, &bad).is_empty());
}
