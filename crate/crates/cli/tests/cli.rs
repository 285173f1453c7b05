use std::path::Path;
use std::process::{Command, Output};

fn cfdebias(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfdebias")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = cfdebias(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn synth_corpus(dir: &Path) {
    write(&dir.join("synth.json"), r#"{"n_train": 96, "n_test": 48, "feature_dim": 6, "seed": 5}"#);
    let out = ok(&["synth", "--config", "synth.json", "--out", "data"], dir);
    assert!(out.contains("train_combined: 96 sessions"), "{out}");
    assert!(dir.join("data/test.json").exists());
}

#[test]
fn synth_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_corpus(d);
    write(
        &d.join("exp.json"),
        r#"{
  "backbone": "tabular",
  "method": "counterfactual",
  "corpus": {"train": "data/train_combined.json", "test": "data/test.json"},
  "optimizer": {"epochs": 5},
  "seed": 1,
  "output_dir": "runs/cf"
}"#,
    );
    let out = ok(&["train", "--config", "exp.json"], d);
    assert!(out.contains("Counterfactual Inference"), "{out}");
    assert!(d.join("runs/cf/model.ckpt").exists());

    let text = ok(&["eval", "--checkpoint", "runs/cf/model.ckpt", "--test", "data/test.json"], d);
    assert!(text.lines().next().unwrap().starts_with("Backbone"), "{text}");
    assert!(d.join("runs/cf/predictions.jsonl").exists());
    assert_eq!(std::fs::read_to_string(d.join("runs/cf/predictions.jsonl")).unwrap().lines().count(), 48);

    let json = ok(&["report", "--in", "runs", "--format", "json"], d);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 1);
    assert_eq!(v["rows"][0]["method"], "counterfactual");
    let text_again = ok(&["report", "--in", "runs", "--format", "text"], d);
    assert_eq!(text, text_again);
}

#[test]
fn compare_runs_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_corpus(d);
    write(
        &d.join("grid.json"),
        r#"{
  "base": {
    "backbone": "tabular",
    "method": "none",
    "corpus": {"train": "data/train_combined.json", "test": "data/test.json"},
    "optimizer": {"epochs": 3},
    "output_dir": "grid"
  },
  "methods": ["counterfactual", "none", "mixfeat", "subsample"]
}"#,
    );
    let text = ok(&["compare", "--grid", "grid.json"], d);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "{text}");
    for (row, label) in rows.iter().zip(["None", "Sub-sampling", "Data Augmentation", "Counterfactual Inference"]) {
        assert!(row.contains(label), "{row}");
    }
    assert_eq!(ok(&["report", "--in", "grid"], d), text);
}

#[test]
fn ingest_fabricated_tree_with_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("daic");
    std::fs::create_dir_all(&root).unwrap();
    let mut train = String::from("Participant_ID,PHQ8_Binary,PHQ8_Score,Gender\n");
    let mut test = String::from("participant_ID,PHQ_Binary,PHQ_Score,Gender\n");
    for (id, score, gender) in [(300, 3, 1), (301, 12, 0), (302, 10, 1), (303, 9, 0), (304, 20, 1)] {
        train += &format!("{id},{},{score},{gender}\n", u8::from(score >= 10));
    }
    for (id, score, gender) in [(400, 15, 0), (401, 1, 1)] {
        test += &format!("{id},{},{score},{gender}\n", u8::from(score >= 10));
    }
    write(&root.join("train_split_Depression_AVEC2017.csv"), &train);
    write(&root.join("dev_split_Depression_AVEC2017.csv"), "Participant_ID,PHQ8_Binary,PHQ8_Score,Gender\n");
    write(&root.join("full_test_split.csv"), &test);
    for id in [300, 301, 302, 303, 304, 400, 401] {
        let p = root.join(format!("{id}_P"));
        std::fs::create_dir_all(&p).unwrap();
        write(&p.join(format!("{id}_AUDIO.wav")), "");
        write(&p.join(format!("{id}_TRANSCRIPT.csv")), "start_time\tstop_time\tspeaker\tvalue\n");
    }
    let out = ok(&["ingest", "--root", "daic", "--threshold", "10", "--exclude", "304", "--out", "m"], dir.path());
    assert!(out.contains("train_combined: 4 sessions (F/0 1, F/1 1, M/0 1, M/1 1)"), "{out}");
    assert!(out.contains("test: 2 sessions (F/0 0, F/1 1, M/0 1, M/1 0)"), "{out}");

    // raising the threshold moves the score-10 and score-12 sessions to non-depressed
    let out = ok(&["ingest", "--root", "daic", "--threshold", "13", "--exclude", "304", "--out", "m13"], dir.path());
    assert!(out.contains("train_combined: 4 sessions (F/0 2, F/1 0, M/0 2, M/1 0)"), "{out}");

    // flipping the male code swaps the gender of every session
    let out = ok(&["ingest", "--root", "daic", "--male-code", "0", "--exclude", "304", "--out", "mf"], dir.path());
    assert!(out.contains("test: 2 sessions (F/0 1, F/1 0, M/0 0, M/1 1)"), "{out}");
}

#[test]
fn invalid_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_corpus(d);
    write(
        &d.join("zero.json"),
        r#"{"backbone": "tabular", "method": "none",
            "corpus": {"train": "data/train_combined.json", "test": "data/test.json"},
            "optimizer": {"epochs": 0}}"#,
    );
    let out = cfdebias(&["train", "--config", "zero.json"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));

    let out = cfdebias(&["report", "--in", "data", "--format", "xml"], d);
    assert!(!out.status.success());

    let out = cfdebias(&["report", "--in", "nowhere"], d);
    assert!(!out.status.success());

    let out = cfdebias(&["eval", "--checkpoint", "missing.ckpt", "--test", "data/test.json"], d);
    assert!(!out.status.success());
}

#[test]
fn train_and_eval_twice_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_corpus(d);
    for run in ["a", "b"] {
        write(
            &d.join(format!("{run}.json")),
            &format!(
                r#"{{"backbone": "tabular", "method": "mixfeat", "seed": 9,
                    "corpus": {{"train": "data/train_combined.json", "test": "data/test.json"}},
                    "optimizer": {{"epochs": 4}}, "output_dir": "out/{run}"}}"#
            ),
        );
        ok(&["train", "--config", &format!("{run}.json")], d);
        ok(&["eval", "--checkpoint", &format!("out/{run}/model.ckpt"), "--test", "data/test.json"], d);
    }
    for file in ["model.ckpt", "predictions.jsonl", "report.json"] {
        let a = std::fs::read(d.join("out/a").join(file)).unwrap();
        let b = std::fs::read(d.join("out/b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn shipped_configs_parse() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let synth: cfdebias::corpus::SynthConfig =
        serde_json::from_str(&std::fs::read_to_string(configs.join("synth.json")).unwrap()).unwrap();
    assert_eq!(synth.n_train, 568);
    cfdebias::harness::ExperimentConfig::load(&configs.join("tabular-counterfactual.json")).unwrap();
    let grid = cfdebias::harness::GridConfig::load(&configs.join("grid-synthetic.json")).unwrap();
    assert_eq!(grid.expand().len(), 4);
    let grid = cfdebias::harness::GridConfig::load(&configs.join("grid-daicwoz.json")).unwrap();
    assert_eq!(grid.expand().len(), 8);
}
