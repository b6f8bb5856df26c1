use std::collections::BTreeSet;
use std::path::PathBuf;

use ppgbp::dataset::{self, BinaryClass};
use ppgbp::experiment::report::{load_reports, metrics_csv};
use ppgbp::experiment::synth::{synth_corpus, write_corpus};
use ppgbp::experiment::{
    decimate, derive_seed, emit_report, evaluate_pipeline, run_experiment, run_grid, train_pipeline, DataConfig,
    ExperimentConfig, ExperimentError, GridConfig, GridSpec, Head, OutputFormat, RunOverride, RunReport, RunStatus,
    SynthConfig, REPORT_SCHEMA,
};
use ppgbp::nn::Extractor;
use ppgbp::provenance::Partition;

fn small_synth() -> SynthConfig {
    SynthConfig { n_train: 40, n_test: 20, ..SynthConfig::default() }
}

/// A quick configuration: tiny corpus, few epochs.
fn quick(extractor: Extractor, head: Head) -> ExperimentConfig {
    ExperimentConfig {
        data: DataConfig { synthetic: Some(small_synth()), ..DataConfig::default() },
        extractor,
        head,
        max_epochs: Some(3),
        ..ExperimentConfig::default()
    }
}

#[test]
fn config_round_trips_through_toml() {
    let config = quick(Extractor::LstmCnn, Head::Rf);
    let text = config.to_toml_string();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), config);
}

#[test]
fn partial_toml_uses_defaults() {
    let config = ExperimentConfig::from_toml_str(
        "extractor = \"bilstm\"\nhead = \"svm\"\nbatch_size = 3\n[data.synthetic]\nn_train = 10\n",
    )
    .unwrap();
    assert_eq!(config.extractor, Extractor::Bilstm);
    assert_eq!(config.head, Head::Svm);
    assert_eq!(config.train_config().max_epochs, 300);
    assert_eq!(config.data.synthetic.as_ref().unwrap().n_train, 10);
    assert_eq!(config.data.synthetic.as_ref().unwrap().n_test, 200);
    assert_eq!(config.decimation, 10);
}

#[test]
fn invalid_configs_are_config_errors() {
    let cases = [
        "",
        "[data.synthetic]\n[stack]\nfold2_fraction = 1.5\n",
        "decimation = 11\n[data.synthetic]\n",
        "batch_size = 0\n[data.synthetic]\n",
        "extractor = \"gru\"\n[data.synthetic]\n",
    ];
    for text in cases {
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{text:?}: {err}");
    }
}

#[test]
fn epochs_follow_batch_size() {
    let mut c = ExperimentConfig::default();
    c.batch_size = 16;
    assert_eq!(c.train_config().max_epochs, 100);
    c.batch_size = 3;
    assert_eq!(c.train_config().max_epochs, 300);
    c.max_epochs = Some(7);
    assert_eq!(c.train_config().max_epochs, 7);
}

#[test]
fn full_grid_has_thirty_base_and_fifteen_meta_rows() {
    let runs = GridConfig::default().expand();
    assert_eq!(runs.len(), 45);
    assert_eq!(runs.iter().filter(|r| !r.stacked).count(), 30);
    assert_eq!(runs.iter().filter(|r| r.stacked).count(), 15);
    let ids: BTreeSet<String> = runs.iter().map(|r| r.run_id()).collect();
    assert_eq!(ids.len(), 45);
    let combos: BTreeSet<(Extractor, Head, usize)> =
        runs.iter().filter(|r| !r.stacked).map(|r| (r.extractor, r.head, r.batch_size)).collect();
    assert_eq!(combos.len(), 30);
}

#[test]
fn grid_toml_with_explicit_runs() {
    let text = r#"
seed = 9
[data.synthetic]
n_train = 20
[grid]
runs = [
  { extractor = "cnn", head = "svm", batch_size = 3 },
  { extractor = "lstm", head = "rf", batch_size = 16, stacked = true, manifest = "data/m.csv" },
]
"#;
    let grid = GridConfig::from_toml_str(text).unwrap();
    let runs = grid.expand();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0].seed, 9);
    assert_eq!(runs[0].run_id(), "cnn-svm-b3");
    assert_eq!(runs[1].run_id(), "meta-lstm-rf-b16");
    assert!(runs[1].data.synthetic.is_none());
    assert_eq!(runs[1].data.manifest, Some(PathBuf::from("data/m.csv")));
}

#[test]
fn derived_seeds_are_label_specific() {
    assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
    assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
    assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
}

#[test]
fn decimate_is_a_block_mean() {
    assert_eq!(decimate(&[1.0, 3.0, 5.0, 7.0, 9.0, 11.0], 2), vec![2.0, 6.0, 10.0]);
    assert_eq!(decimate(&[1.0, 2.0, 3.0], 1), vec![1.0, 2.0, 3.0]);
}

#[test]
fn synthetic_corpus_is_balanced_and_prefix_stable() {
    let cfg = small_synth();
    let (train, test) = synth_corpus(&cfg);
    assert_eq!((train.len(), test.len()), (40, 20));
    let hyper = train.iter().filter(|s| s.record.label == BinaryClass::Hypertension).count();
    assert_eq!(hyper, 20);
    let (bigger, _) = synth_corpus(&SynthConfig { n_train: 60, ..cfg.clone() });
    assert_eq!(bigger[..40].iter().map(|s| &s.samples).collect::<Vec<_>>(), train.iter().map(|s| &s.samples).collect::<Vec<_>>());
    assert!(train.iter().all(|s| s.samples.len() == dataset::SEGMENT_LEN));
}

#[test]
fn written_corpus_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_train: 6, n_test: 4, ..SynthConfig::default() };
    let manifest = write_corpus(dir.path(), &cfg).unwrap();
    let loaded = dataset::load_dataset(&manifest).unwrap();
    let (train, test) = synth_corpus(&cfg);
    assert_eq!(loaded.len(), 10);
    for (a, b) in loaded.iter().zip(train.iter().chain(&test)) {
        assert_eq!(a.record.label, b.record.label);
        assert_eq!(a.record.subject_id, b.record.subject_id);
        let worst = a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-9, "{worst}");
    }
}

#[test]
fn run_reports_both_classes_and_respects_epoch_cap() {
    let mut config = quick(Extractor::Lstm, Head::Softmax);
    config.max_epochs = None;
    config.data.synthetic = Some(SynthConfig { n_train: 24, n_test: 10, ..SynthConfig::default() });
    let report = run_experiment(&config).unwrap();
    assert_eq!(report.status, RunStatus::Completed);
    assert_eq!(report.metrics.len(), 2);
    assert!(report.metrics.iter().all(|m| m.accuracy.is_some() && m.recall.is_some() && m.specificity.is_some()));
    let training = report.training.as_ref().unwrap();
    assert_eq!(training.max_epochs, 100);
    assert!(training.epochs_run <= 100);
    assert_eq!((report.n_train, report.n_test), (24, 10));
}

#[test]
fn same_seed_gives_identical_reports() {
    for head in Head::ALL {
        let config = quick(Extractor::Cnn, head);
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.training, b.training);
        assert_eq!(a.audit, b.audit);
    }
}

#[test]
fn grid_runs_match_single_runs() {
    let base = quick(Extractor::Cnn, Head::Softmax);
    let cells = vec![
        RunOverride { extractor: Extractor::Cnn, head: Head::Rf, batch_size: 16, stacked: false, manifest: None },
        RunOverride { extractor: Extractor::Cnn, head: Head::Svm, batch_size: 16, stacked: false, manifest: None },
        RunOverride { extractor: Extractor::StftCnn, head: Head::Softmax, batch_size: 16, stacked: false, manifest: None },
    ];
    let grid = GridConfig { base: base.clone(), grid: GridSpec { runs: cells.clone(), ..GridSpec::default() } };
    let reversed = GridConfig { base, grid: GridSpec { runs: cells.into_iter().rev().collect(), ..GridSpec::default() } };
    let forward = run_grid(&grid);
    let backward = run_grid(&reversed);
    for r in &forward.reports {
        let other = backward.reports.iter().find(|o| o.run_id == r.run_id).unwrap();
        assert_eq!(r.metrics, other.metrics, "{}", r.run_id);
        let alone = run_experiment(&r.config).unwrap();
        assert_eq!(r.metrics, alone.metrics, "{}", r.run_id);
        assert_eq!(r.training, alone.training, "{}", r.run_id);
    }
}

#[test]
fn singleton_grid_gives_one_report() {
    let outcome = run_grid(&GridConfig::single(quick(Extractor::Cnn, Head::Softmax)));
    assert_eq!(outcome.reports.len(), 1);
    assert!(outcome.reports[0].is_completed());
}

#[test]
fn failing_run_is_isolated() {
    let base = quick(Extractor::Cnn, Head::Softmax);
    let missing = RunOverride {
        extractor: Extractor::Cnn,
        head: Head::Svm,
        batch_size: 16,
        stacked: false,
        manifest: Some(PathBuf::from("/nonexistent/manifest.csv")),
    };
    let ok = RunOverride { extractor: Extractor::Cnn, head: Head::Softmax, batch_size: 16, stacked: false, manifest: None };
    let grid = GridConfig { base, grid: GridSpec { runs: vec![missing, ok], ..GridSpec::default() } };
    let outcome = run_grid(&grid);
    assert!(matches!(outcome.reports[0].status, RunStatus::Failed { exit_code: 2, .. }));
    assert!(outcome.reports[0].metrics.is_empty());
    assert!(outcome.reports[1].is_completed());
    let dir = tempfile::tempdir().unwrap();
    emit_report(&outcome.reports, OutputFormat::Csv, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
}

#[test]
fn missing_manifest_surfaces_as_data_error() {
    let mut config = quick(Extractor::Cnn, Head::Softmax);
    config.data = DataConfig { manifest: Some(PathBuf::from("/nonexistent.csv")), ..DataConfig::default() };
    let err = run_experiment(&config).unwrap_err();
    assert!(matches!(err, ExperimentError::Data(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn manifest_data_matches_in_memory_generator_when_split_by_subject() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_train: 30, n_test: 10, ..SynthConfig::default() };
    let manifest = write_corpus(dir.path(), &cfg).unwrap();
    let mut config = quick(Extractor::Cnn, Head::Rf);
    config.data = DataConfig { manifest: Some(manifest), ..DataConfig::default() };
    let report = run_experiment(&config).unwrap();
    // 40 subjects, 70% for training.
    assert_eq!((report.n_train, report.n_test), (28, 12));
    assert!(!report.audit.iter().any(|e| e.counts.contains_key(&Partition::Test)));
}

#[test]
fn no_fit_sees_test_samples_and_bases_see_only_fold_one() {
    let mut stacked = quick(Extractor::Cnn, Head::Svm);
    stacked.stacked = true;
    let grid = GridConfig {
        base: stacked.clone(),
        grid: GridSpec {
            runs: vec![
                RunOverride { extractor: Extractor::Cnn, head: Head::Svm, batch_size: 16, stacked: true, manifest: None },
                RunOverride { extractor: Extractor::Cnn, head: Head::Rf, batch_size: 16, stacked: false, manifest: None },
            ],
            ..GridSpec::default()
        },
    };
    let outcome = run_grid(&grid);
    assert!(outcome.reports.iter().all(RunReport::is_completed));
    assert!(!outcome.audit.touched(Partition::Test));
    for e in outcome.audit.entries() {
        assert!(e.counts.keys().all(|p| e.allowed.contains(p)), "{e:?}");
    }
    let meta = &outcome.reports[0];
    let fold1_fits: Vec<_> =
        meta.audit.iter().filter(|e| e.fit.starts_with("stack:base") || e.fit.starts_with("extractor")).collect();
    assert!(!fold1_fits.is_empty());
    let diag = meta.fold2_diagnostics.as_ref().unwrap();
    assert_eq!(diag.fold2_size, 10);
    assert_eq!(diag.fold1_size, 30);
    // The extractor and head inside the stack were fitted on fold 1 only.
    for e in &meta.audit {
        if e.fit.starts_with("extractor") || e.fit.starts_with("head") {
            assert_eq!(e.counts.values().sum::<usize>(), 30, "{}", e.fit);
        }
        if e.fit == "stack:meta" {
            assert_eq!(e.counts.get(&Partition::Fold2), Some(&10));
        }
    }
    assert!(meta.meta_training.is_some());
    assert_eq!(meta.model, "meta_cnn");
}

#[test]
fn json_round_trip_is_byte_identical() {
    let report = run_experiment(&quick(Extractor::Cnn, Head::Svm)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_report(std::slice::from_ref(&report), OutputFormat::Json, dir.path()).unwrap();
    assert_eq!(paths.len(), 1);
    let text = std::fs::read_to_string(&paths[0]).unwrap();
    let back = RunReport::from_json(&text).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.to_json(), text);
    assert_eq!(load_reports(dir.path()).unwrap(), vec![report]);
}

#[test]
fn reports_validate_against_the_schema() {
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let mut stacked = quick(Extractor::Cnn, Head::Rf);
    stacked.stacked = true;
    let completed = run_experiment(&stacked).unwrap();
    let mut bad = quick(Extractor::Cnn, Head::Rf);
    bad.data = DataConfig { manifest: Some(PathBuf::from("/nope.csv")), ..DataConfig::default() };
    let failed = run_grid(&GridConfig::single(bad)).reports.remove(0);
    for report in [completed, failed] {
        let value: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{}: {errors:?}", report.run_id);
    }
    let mut broken: serde_json::Value = serde_json::from_str(&run_experiment(&quick(Extractor::Cnn, Head::Softmax)).unwrap().to_json()).unwrap();
    broken["head"] = "knn".into();
    assert!(!validator.is_valid(&broken));
}

#[test]
fn csv_has_two_rows_per_completed_run() {
    let reports: Vec<RunReport> =
        [Head::Softmax, Head::Rf].into_iter().map(|h| run_experiment(&quick(Extractor::Cnn, h)).unwrap()).collect();
    let text = metrics_csv(&reports);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "model,head,batch_size,class,precision,recall,f1,specificity,accuracy");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("cnn,softmax,16,pre_hypertension,"));
    assert!(rows[3].starts_with("cnn,rf,16,hypertension,"));
    let dir = tempfile::tempdir().unwrap();
    let written = emit_report(&reports, OutputFormat::Csv, dir.path()).unwrap();
    assert_eq!(written.len(), 3);
    let curve = std::fs::read_to_string(dir.path().join("curves/cnn-rf-b16.csv")).unwrap();
    assert!(curve.starts_with("epoch,train_loss,val_loss\n1,"));
}

#[test]
fn emitting_nothing_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_report(&[], OutputFormat::Json, dir.path()).is_err());
}

#[test]
fn saved_pipeline_reproduces_its_report() {
    for head in Head::ALL {
        let config = quick(Extractor::Cnn, head);
        let (pipeline, report) = train_pipeline(&config).unwrap();
        let restored = ppgbp::experiment::Pipeline::from_json(&pipeline.to_json().unwrap()).unwrap();
        let again = evaluate_pipeline(&config, &restored).unwrap();
        assert_eq!(again.metrics, report.metrics, "{head}");
    }
}
