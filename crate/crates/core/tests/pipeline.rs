use std::path::{Path, PathBuf};

use cfdebias::corpus::{self, CorpusManifest, SynthConfig, CELLS, SPLIT_TEST, SPLIT_TRAIN, REFERENCE_TEST};
use cfdebias::datamodel::{DepressionLabel, GenderCode, PredictionRecord, SessionRecord};
use cfdebias::fairness::{Averaging, FairnessReport};
use cfdebias::harness::{self, AccessLog, BackboneKind, Checkpoint, ExperimentConfig, GridConfig, Method, ReportFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic_files(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let cfg = SynthConfig { n_train: 96, n_test: 48, feature_dim: 6, seed, ..Default::default() };
    let (train, test) = corpus::generate_synthetic(&cfg).unwrap();
    let (tp, sp) = (dir.join("train.json"), dir.join("test.json"));
    train.save(&tp).unwrap();
    test.save(&sp).unwrap();
    (tp, sp)
}

fn write_tone(path: &Path, seconds: f64, freq: f64, rng: &mut ChaCha8Rng) {
    let spec = hound::WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for i in 0..(16000.0 * seconds) as usize {
        let t = i as f64 / 16000.0;
        let s = 0.3 * (2.0 * std::f64::consts::PI * freq * t).sin() + rng.random_range(-0.05..0.05);
        w.write_sample((s * i16::MAX as f64) as i16).unwrap();
    }
    w.finalize().unwrap();
}

fn bare_record(id: &str, gender: GenderCode, label: DepressionLabel) -> SessionRecord {
    SessionRecord {
        session_id: id.to_string(),
        gender,
        label,
        audio_path: None,
        transcript_path: None,
        features: None,
        augmented: false,
        parents: None,
        lambda: None,
    }
}

/// Small audio corpus with `per_cell` sessions per gender × label cell.
fn audio_manifest(dir: &Path, split: &str, per_cell: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for &(g, l) in &CELLS {
        for k in 0..per_cell {
            let id = format!("{split}-{}{}-{k}", g.value(), l.value());
            let audio = dir.join(format!("{id}.wav"));
            let freq = 200.0 + 150.0 * l.value() as f64 + 40.0 * g.value() as f64;
            write_tone(&audio, 1.2, freq, &mut rng);
            let transcript = dir.join(format!("{id}.csv"));
            std::fs::write(
                &transcript,
                "start_time\tstop_time\tspeaker\tvalue\n0.0\t0.1\tEllie\thello\n0.1\t1.1\tParticipant\tfine\n",
            )
            .unwrap();
            records.push(SessionRecord {
                audio_path: Some(audio),
                transcript_path: Some(transcript),
                ..bare_record(&id, g, l)
            });
        }
    }
    let m = CorpusManifest::new(split, records);
    let path = dir.join(format!("{split}.json"));
    m.save(&path).unwrap();
    path
}

#[test]
fn training_never_reads_the_test_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (tp, sp) = synthetic_files(dir.path(), 1);
    for method in Method::ALL {
        let mut c = ExperimentConfig::new(BackboneKind::Tabular, method, &tp, &sp);
        c.optimizer.epochs = 2;
        let log = AccessLog::new();
        harness::train_traced(&c, &log).unwrap();
        assert!(log.touched(&tp));
        assert!(!log.touched(&sp), "{method:?} read the test manifest");
    }
}

#[test]
fn audio_training_never_reads_test_audio() {
    let dir = tempfile::tempdir().unwrap();
    let tp = audio_manifest(dir.path(), SPLIT_TRAIN, 2, 1);
    let sp = audio_manifest(dir.path(), SPLIT_TEST, 1, 2);
    let test = CorpusManifest::load(&sp).unwrap();
    let mut c = ExperimentConfig::new(BackboneKind::Sta, Method::Counterfactual, &tp, &sp);
    c.optimizer.epochs = 1;
    let log = AccessLog::new();
    harness::train_traced(&c, &log).unwrap();
    for r in &test.records {
        assert!(!log.touched(r.audio_path.as_ref().unwrap()));
    }
}

#[test]
fn perfect_predictor_on_reference_test_distribution() {
    let mut recs = Vec::new();
    for &(g, l) in &CELLS {
        for k in 0..REFERENCE_TEST.get(g, l) {
            recs.push(PredictionRecord {
                session_id: format!("{}{}{k}", g.value(), l.value()),
                gender: g,
                true_label: l,
                predicted_label: l,
                tie_scores: None,
            });
        }
    }
    let r = FairnessReport::from_records(&recs, Averaging::Macro).unwrap();
    assert_eq!((r.f1, r.accuracy, r.ea), (1.0, 1.0, 0.0));
    assert!((r.di.unwrap() - 23.0 / 24.0).abs() < 1e-12);
    assert_eq!(r.cells()[6], "0.958");
}

#[test]
fn saved_checkpoint_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let (tp, sp) = synthetic_files(dir.path(), 2);
    let mut c = ExperimentConfig::new(BackboneKind::Tabular, Method::Counterfactual, &tp, &sp);
    c.optimizer.epochs = 5;
    c.output_dir = Some(dir.path().join("run"));
    let result = harness::run_experiment(&c).unwrap();
    let ckpt = Checkpoint::load(result.checkpoint.as_ref().unwrap()).unwrap();
    let again = harness::evaluate(&ckpt, &CorpusManifest::load(&sp).unwrap()).unwrap();
    assert_eq!(again.report, result.report);
    assert_eq!(again.predictions, result.predictions);
    assert!(result.predictions.iter().all(|p| p.tie_scores.is_some()));
    result.verify(Averaging::Macro).unwrap();
    let loaded = harness::load_run(&dir.path().join("run").join(harness::RUN_FILE)).unwrap();
    assert_eq!(loaded.report, result.report);
}

#[test]
fn debug_log_has_one_entry_per_session() {
    let dir = tempfile::tempdir().unwrap();
    let (tp, sp) = synthetic_files(dir.path(), 3);
    let mut c = ExperimentConfig::new(BackboneKind::Tabular, Method::Counterfactual, &tp, &sp);
    c.optimizer.epochs = 2;
    c.debug_log = true;
    c.output_dir = Some(dir.path().join("run"));
    harness::run_experiment(&c).unwrap();
    let text = std::fs::read_to_string(dir.path().join("run").join(harness::DEBUG_FILE)).unwrap();
    let entries: Vec<harness::DebugEntry> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(entries.len(), 48);
    for e in entries {
        let (f, cf, tie) = (e.fused_factual.unwrap(), e.fused_counterfactual.unwrap(), e.tie.unwrap());
        assert!((tie[0] - (f[0] - cf[0])).abs() < 1e-12 && (tie[1] - (f[1] - cf[1])).abs() < 1e-12);
    }
}

#[test]
fn audio_backbones_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let tp = audio_manifest(dir.path(), SPLIT_TRAIN, 2, 3);
    let sp = audio_manifest(dir.path(), SPLIT_TEST, 1, 4);
    for (backbone, method) in [
        (BackboneKind::Sta, Method::None),
        (BackboneKind::Sta, Method::Mixfeat),
        (BackboneKind::Netvlad, Method::Counterfactual),
    ] {
        let mut c = ExperimentConfig::new(backbone, method, &tp, &sp);
        c.optimizer.epochs = 1;
        c.optimizer.batch_size = 4;
        c.output_dir = Some(dir.path().join(format!("{backbone:?}-{method:?}")));
        let r = harness::run_experiment(&c).unwrap();
        assert_eq!(r.predictions.len(), 4);
        r.verify(Averaging::Macro).unwrap();
        let ckpt = Checkpoint::load(r.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(ckpt.meta.norm_stats.is_some(), backbone == BackboneKind::Sta);
    }
}

#[test]
fn comparison_grid_covers_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let (tp, sp) = synthetic_files(dir.path(), 4);
    let mut base = ExperimentConfig::new(BackboneKind::Tabular, Method::None, &tp, &sp);
    base.optimizer.epochs = 2;
    base.output_dir = Some(dir.path().join("grid"));
    let grid = GridConfig { base: Some(base), backbones: vec![BackboneKind::Tabular], methods: Method::ALL.to_vec(), runs: Vec::new() };
    let results = harness::compare(&grid.expand()).unwrap();
    assert_eq!(results.len(), 4);
    let collected = harness::collect_runs(&dir.path().join("grid")).unwrap();
    assert_eq!(collected.len(), 4);
    let text = harness::emit_report(&collected, ReportFormat::Text).unwrap();
    for (line, method) in text.lines().skip(1).zip(Method::ALL) {
        assert!(line.contains(method.label()), "{line}");
    }
}

#[test]
fn gender_codes_round_trip_through_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let r = SessionRecord { audio_path: Some("x.wav".into()), ..bare_record("x", GenderCode::FEMALE, DepressionLabel::DEPRESSED) };
    let m = CorpusManifest::new(SPLIT_TEST, vec![r]);
    m.validate().unwrap();
    let p = dir.path().join("m.json");
    m.save(&p).unwrap();
    let back = CorpusManifest::load(&p).unwrap();
    assert_eq!(back.records[0].gender, GenderCode::FEMALE);
    assert_eq!(back.content_hash().unwrap(), m.content_hash().unwrap());
}
