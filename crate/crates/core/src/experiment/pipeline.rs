use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::report::{Fold2Diagnostics, RunReport, RunStatus, TrainingSummary};
use super::{derive_seed, synth, ExperimentConfig, ExperimentError, GridConfig, Head, Result};
use crate::classifiers::{rf_fit, svm_fit, Forest, ForestConfig, SvmModel};
use crate::dataset::{self, BinaryClass, PpgSegment};
use crate::ensemble::{stack_fit, stack_predict, BaseLearner, StackConfig};
use crate::metrics::per_class_metrics;
use crate::nn::{self, architecture, Extractor, Model, Tensor, TrainReport};
use crate::preprocess::Preprocessor;
use crate::provenance::{AuditEntry, AuditLog, Partition, SampleTag};
use crate::spectral::{log_magnitude, Stft};

/// Block means of `factor` consecutive samples.
pub fn decimate(signal: &[f64], factor: usize) -> Vec<f64> {
    signal.chunks_exact(factor).map(|c| c.iter().sum::<f64>() / factor as f64).collect()
}

/// Log-magnitude spectrogram as a `[bins, frames]` tensor.
pub fn stft_input(stft: &Stft, signal: &[f64], sample_rate_hz: f64) -> Result<Tensor> {
    let spec = log_magnitude(&stft.transform(signal, sample_rate_hz)?);
    Ok(Tensor::new(vec![spec.bins, spec.frames], spec.bins_by_frames()).expect("spectrogram layout"))
}

/// Reference to a training or test sample of a [`Corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SampleRef {
    Train(usize),
    Test(usize),
}

/// Preprocessed model inputs and provenance for one train/test split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train_tags: Vec<SampleTag>,
    pub test_tags: Vec<SampleTag>,
    pub train_labels: Vec<BinaryClass>,
    pub test_labels: Vec<BinaryClass>,
    time: [Vec<Tensor>; 2],
    stft: Option<[Vec<Tensor>; 2]>,
}

impl Corpus {
    /// Loads the configured data source, splits it and builds the time
    /// (and, when asked, spectrogram) inputs.
    pub fn load(config: &ExperimentConfig, with_stft: bool) -> Result<Self> {
        let (train, test) = match (&config.data.synthetic, &config.data.manifest) {
            (Some(s), _) => synth::synth_corpus(s),
            (None, Some(manifest)) => {
                let segments = dataset::load_dataset(manifest)?;
                let records: Vec<_> = segments.iter().map(|s| s.record.clone()).collect();
                let plan = dataset::split_subjects(&records, config.data.train_fraction, config.seed)?;
                segments.into_iter().partition(|s| plan.is_train(&s.record.subject_id))
            }
            (None, None) => return Err(ExperimentError::Config("no data source configured".into())),
        };
        Self::from_segments(&train, &test, config, with_stft)
    }

    pub fn from_segments(
        train: &[PpgSegment],
        test: &[PpgSegment],
        config: &ExperimentConfig,
        with_stft: bool,
    ) -> Result<Self> {
        let pre = Preprocessor::new(config.preprocess.clone())?;
        let stft = Stft::new(config.stft)?;
        let build = |segments: &[PpgSegment], partition: Partition| -> Result<_> {
            let mut time = Vec::with_capacity(segments.len());
            let mut spec = Vec::new();
            for s in segments {
                let x = pre.apply(&s.samples)?;
                let d = decimate(&x, config.decimation);
                let n = d.len();
                time.push(Tensor::new(vec![1, n], d).expect("sample layout"));
                if with_stft {
                    spec.push(stft_input(&stft, &x, s.sample_rate_hz)?);
                }
            }
            let tags = segments.iter().map(|s| SampleTag::new(s.record.key(), partition)).collect::<Vec<_>>();
            let labels = segments.iter().map(|s| s.record.label).collect::<Vec<_>>();
            Ok((time, spec, tags, labels))
        };
        let (time_tr, spec_tr, train_tags, train_labels) = build(train, Partition::Train)?;
        let (time_te, spec_te, test_tags, test_labels) = build(test, Partition::Test)?;
        if train_tags.is_empty() || test_tags.is_empty() {
            return Err(dataset::DatasetError::TooFewSubjects(0).into());
        }
        Ok(Self {
            train_tags,
            test_tags,
            train_labels,
            test_labels,
            time: [time_tr, time_te],
            stft: with_stft.then_some([spec_tr, spec_te]),
        })
    }

    fn side(&self, kind: Extractor, test: bool) -> Result<&[Tensor]> {
        let sets = if kind.uses_stft() {
            self.stft.as_ref().ok_or_else(|| ExperimentError::Config("corpus built without spectrograms".into()))?
        } else {
            &self.time
        };
        Ok(&sets[test as usize])
    }

    pub fn train_inputs(&self, kind: Extractor) -> Result<&[Tensor]> {
        self.side(kind, false)
    }

    pub fn test_inputs(&self, kind: Extractor) -> Result<&[Tensor]> {
        self.side(kind, true)
    }

    pub fn input(&self, kind: Extractor, r: SampleRef) -> Result<&Tensor> {
        Ok(match r {
            SampleRef::Train(i) => &self.train_inputs(kind)?[i],
            SampleRef::Test(i) => &self.test_inputs(kind)?[i],
        })
    }
}

fn nn_err(context: &str) -> impl FnOnce(nn::NnError) -> ExperimentError + '_ {
    move |source| ExperimentError::Nn { context: context.to_string(), source }
}

/// A trained extractor with the record of what it was fitted on.
#[derive(Debug, Clone)]
pub struct TrainedExtractor {
    pub kind: Extractor,
    pub model: Model,
    pub report: TrainReport,
    pub seed: u64,
    pub max_epochs: usize,
    pub audit: AuditEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedHead {
    Softmax,
    Svm { model: SvmModel },
    Rf { forest: Forest },
}

impl FittedHead {
    pub fn head(&self) -> Head {
        match self {
            FittedHead::Softmax => Head::Softmax,
            FittedHead::Svm { .. } => Head::Svm,
            FittedHead::Rf { .. } => Head::Rf,
        }
    }

    fn proba(&self, model: &Model, inputs: &[Tensor]) -> Result<Vec<[f64; 2]>> {
        let classifier = |e| ExperimentError::Classifier { context: "head prediction".into(), source: e };
        match self {
            FittedHead::Softmax => Ok(nn::predict_proba(model, inputs)
                .map_err(nn_err("extractor prediction"))?
                .into_iter()
                .map(|p| [p[0], p[1]])
                .collect()),
            FittedHead::Svm { model: svm } => nn::extract_features(model, inputs)
                .map_err(nn_err("feature extraction"))?
                .iter()
                .map(|f| svm.predict_proba(f).map_err(classifier))
                .collect(),
            FittedHead::Rf { forest } => nn::extract_features(model, inputs)
                .map_err(nn_err("feature extraction"))?
                .iter()
                .map(|f| forest.predict_proba(f).map_err(classifier))
                .collect(),
        }
    }
}

/// Extractor plus head.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub extractor: Rc<TrainedExtractor>,
    pub head: FittedHead,
}

/// On-disk form of a [`Pipeline`].
#[derive(Serialize, Deserialize)]
struct PipelineFile {
    extractor: Extractor,
    seed: u64,
    max_epochs: usize,
    training: TrainReport,
    audit: AuditEntry,
    model: serde_json::Value,
    head: FittedHead,
}

impl Pipeline {
    pub fn to_json(&self) -> Result<String> {
        let e = &self.extractor;
        let model = e.model.to_json().map_err(nn_err("model serialization"))?;
        let file = PipelineFile {
            extractor: e.kind,
            seed: e.seed,
            max_epochs: e.max_epochs,
            training: e.report.clone(),
            audit: e.audit.clone(),
            model: serde_json::from_str(&model).expect("model json is valid"),
            head: self.head.clone(),
        };
        Ok(serde_json::to_string(&file).expect("pipeline serializes"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PipelineFile =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(format!("invalid pipeline file: {e}")))?;
        let model = Model::from_json(&file.model.to_string()).map_err(nn_err("model deserialization"))?;
        Ok(Self {
            extractor: Rc::new(TrainedExtractor {
                kind: file.extractor,
                model,
                report: file.training,
                seed: file.seed,
                max_epochs: file.max_epochs,
                audit: file.audit,
            }),
            head: file.head,
        })
    }

    pub fn predict_proba(&self, inputs: &[Tensor]) -> Result<Vec<[f64; 2]>> {
        self.head.proba(&self.extractor.model, inputs)
    }
}

fn argmax(p: [f64; 2]) -> BinaryClass {
    if p[1] > p[0] {
        BinaryClass::Hypertension
    } else {
        BinaryClass::PreHypertension
    }
}

/// Trained extractors shared between grid cells, keyed by everything that
/// determines their parameters.
#[derive(Default)]
struct ExtractorCache {
    models: BTreeMap<String, Rc<TrainedExtractor>>,
}

impl ExtractorCache {
    fn get_or_train(
        &mut self,
        corpus_key: &str,
        corpus: &Corpus,
        config: &ExperimentConfig,
        indices: &[usize],
    ) -> Result<Rc<TrainedExtractor>> {
        let cfg = config.train_config();
        let key = format!(
            "{corpus_key}|{}|{}|{:?}",
            config.extractor,
            serde_json::to_string(&cfg).expect("train config serializes"),
            indices
        );
        if let Some(m) = self.models.get(&key) {
            return Ok(m.clone());
        }
        let all = corpus.train_inputs(config.extractor)?;
        let inputs: Vec<Tensor> = indices.iter().map(|&i| all[i].clone()).collect();
        let labels: Vec<usize> = indices.iter().map(|&i| corpus.train_labels[i].index()).collect();
        let tags: Vec<&SampleTag> = indices.iter().map(|&i| &corpus.train_tags[i]).collect();
        let fit_name = format!("extractor:{}:b{}", config.extractor, config.batch_size);
        let mut audit = AuditLog::new();
        audit.admit(&fit_name, tags, &[Partition::Train])?;

        let shape = inputs[0].shape();
        let spec = architecture(config.extractor, [shape[0], shape[1]]);
        let mut model = Model::new(spec, cfg.seed).map_err(nn_err(&fit_name))?;
        let started = Instant::now();
        let report = nn::train(&mut model, &inputs, &labels, &cfg).map_err(nn_err(&fit_name))?;
        info!(
            "{fit_name}: {} samples, {} epochs (best {}) in {:.1}s",
            inputs.len(),
            report.epochs_run,
            report.best_epoch,
            started.elapsed().as_secs_f64()
        );
        let trained = Rc::new(TrainedExtractor {
            kind: config.extractor,
            model,
            report,
            seed: cfg.seed,
            max_epochs: cfg.max_epochs,
            audit: audit.entries()[0].clone(),
        });
        self.models.insert(key, trained.clone());
        Ok(trained)
    }
}

/// Fits `config.head` on the extractor's view of the given train samples.
fn fit_head(
    config: &ExperimentConfig,
    corpus: &Corpus,
    extractor: &TrainedExtractor,
    indices: &[usize],
    audit: &mut AuditLog,
) -> Result<FittedHead> {
    let fit_name = format!("head:{}:{}:b{}", config.head, config.extractor, config.batch_size);
    audit.admit(&fit_name, indices.iter().map(|&i| &corpus.train_tags[i]), &[Partition::Train])?;
    if config.head == Head::Softmax {
        return Ok(FittedHead::Softmax);
    }
    let all = corpus.train_inputs(config.extractor)?;
    let inputs: Vec<Tensor> = indices.iter().map(|&i| all[i].clone()).collect();
    let labels: Vec<BinaryClass> = indices.iter().map(|&i| corpus.train_labels[i]).collect();
    let features = nn::extract_features(&extractor.model, &inputs).map_err(nn_err("feature extraction"))?;
    let classifier = |e| ExperimentError::Classifier { context: fit_name.clone(), source: e };
    Ok(match config.head {
        Head::Svm => FittedHead::Svm { model: svm_fit(&features, &labels, &config.svm).map_err(classifier)? },
        Head::Rf => {
            let forest_cfg = ForestConfig { seed: derive_seed(config.seed, &fit_name), ..config.forest };
            FittedHead::Rf { forest: rf_fit(&features, &labels, &forest_cfg).map_err(classifier)? }
        }
        Head::Softmax => unreachable!(),
    })
}

/// A full pipeline used as a stacking base learner over train samples.
struct PipelineLearner<'a> {
    corpus_key: &'a str,
    corpus: &'a Corpus,
    cache: &'a RefCell<ExtractorCache>,
    config: &'a ExperimentConfig,
    fitted: Option<Pipeline>,
    fit_indices: Vec<usize>,
    audit: AuditLog,
}

impl BaseLearner<SampleRef> for PipelineLearner<'_> {
    fn name(&self) -> String {
        format!("{}-{}-b{}", self.config.extractor, self.config.head, self.config.batch_size)
    }

    fn fit(&mut self, x: &[&SampleRef], _y: &[BinaryClass]) -> std::result::Result<(), String> {
        let mut indices = Vec::with_capacity(x.len());
        for r in x {
            match r {
                SampleRef::Train(i) => indices.push(*i),
                SampleRef::Test(i) => return Err(format!("test sample {i} offered for fitting")),
            }
        }
        let extractor = self
            .cache
            .borrow_mut()
            .get_or_train(self.corpus_key, self.corpus, self.config, &indices)
            .map_err(|e| e.to_string())?;
        let head =
            fit_head(self.config, self.corpus, &extractor, &indices, &mut self.audit).map_err(|e| e.to_string())?;
        self.fit_indices = indices;
        self.fitted = Some(Pipeline { extractor, head });
        Ok(())
    }

    fn predict_proba(&self, x: &SampleRef) -> std::result::Result<[f64; 2], String> {
        let pipeline = self.fitted.as_ref().ok_or("base learner used before fitting")?;
        let input = self.corpus.input(self.config.extractor, *x).map_err(|e| e.to_string())?;
        let p = pipeline.predict_proba(std::slice::from_ref(input)).map_err(|e| e.to_string())?;
        Ok(p[0])
    }
}

struct RunOutput {
    predictions: Vec<BinaryClass>,
    training: TrainingSummary,
    meta_training: Option<TrainingSummary>,
    diagnostics: Option<Fold2Diagnostics>,
    model_seed: u64,
    audit: Vec<AuditEntry>,
}

fn summary(report: &TrainReport, max_epochs: usize) -> TrainingSummary {
    TrainingSummary {
        history: report.history.clone(),
        epochs_run: report.epochs_run,
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        max_epochs,
    }
}

fn fit_base(
    corpus_key: &str,
    corpus: &Corpus,
    cache: &RefCell<ExtractorCache>,
    config: &ExperimentConfig,
) -> Result<(Pipeline, Vec<AuditEntry>)> {
    let indices: Vec<usize> = (0..corpus.train_labels.len()).collect();
    let extractor = cache.borrow_mut().get_or_train(corpus_key, corpus, config, &indices)?;
    let mut audit = AuditLog::new();
    let head = fit_head(config, corpus, &extractor, &indices, &mut audit)?;
    let mut entries = vec![extractor.audit.clone()];
    entries.extend(audit.entries().iter().cloned());
    Ok((Pipeline { extractor, head }, entries))
}

fn evaluate(pipeline: &Pipeline, corpus: &Corpus, config: &ExperimentConfig, audit: Vec<AuditEntry>) -> Result<RunOutput> {
    let proba = pipeline.predict_proba(corpus.test_inputs(config.extractor)?)?;
    let extractor = &pipeline.extractor;
    Ok(RunOutput {
        predictions: proba.into_iter().map(argmax).collect(),
        training: summary(&extractor.report, extractor.max_epochs),
        meta_training: None,
        diagnostics: None,
        model_seed: extractor.seed,
        audit,
    })
}

fn run_base(corpus_key: &str, corpus: &Corpus, cache: &RefCell<ExtractorCache>, config: &ExperimentConfig) -> Result<RunOutput> {
    let (pipeline, audit) = fit_base(corpus_key, corpus, cache, config)?;
    evaluate(&pipeline, corpus, config, audit)
}

fn run_stacked(
    corpus_key: &str,
    corpus: &Corpus,
    cache: &RefCell<ExtractorCache>,
    config: &ExperimentConfig,
) -> Result<RunOutput> {
    let stack_cfg = StackConfig { seed: derive_seed(config.seed, &format!("stack:{}", config.stack.seed)), ..config.stack.clone() };
    let refs: Vec<SampleRef> = (0..corpus.train_labels.len()).map(SampleRef::Train).collect();
    let learner = PipelineLearner {
        corpus_key,
        corpus,
        cache,
        config,
        fitted: None,
        fit_indices: Vec::new(),
        audit: AuditLog::new(),
    };
    let mut audit = AuditLog::new();
    let ensemble = |e| ExperimentError::Ensemble { context: format!("stacking {}", config.run_id()), source: e };
    let model = stack_fit(&refs, &corpus.train_labels, &corpus.train_tags, vec![learner], &stack_cfg, &mut audit)
        .map_err(ensemble)?;

    // Fold-2 samples must never reach a base learner's own fits.
    let fold2: BTreeSet<usize> = model.fold2.iter().copied().collect();
    for base in &model.bases {
        if let Some(&i) = base.fit_indices.iter().find(|i| fold2.contains(i)) {
            return Err(crate::provenance::LeakageError {
                fit: format!("stack:base:{}", base.name()),
                id: corpus.train_tags[i].id.clone(),
                partition: Partition::Fold2,
            }
            .into());
        }
    }

    let predictions = (0..corpus.test_labels.len())
        .map(|i| stack_predict(&model, &SampleRef::Test(i)).map(|(c, _)| c))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(ensemble)?;
    let fold2_pred = model
        .fold2_inputs
        .iter()
        .map(|v| model.predict_from_inputs(v).map(|(c, _)| c))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(ensemble)?;
    let fold2_labels: Vec<BinaryClass> = model.fold2.iter().map(|&i| corpus.train_labels[i]).collect();
    let metrics = per_class_metrics(&fold2_pred, &fold2_labels)
        .map_err(|e| ExperimentError::Config(format!("fold-2 metrics: {e}")))?;

    let base = &model.bases[0];
    let extractor = &base.fitted.as_ref().expect("fitted by stack_fit").extractor;
    let mut entries = vec![extractor.audit.clone()];
    entries.extend(base.audit.entries().iter().cloned());
    entries.extend(audit.entries().iter().cloned());
    Ok(RunOutput {
        predictions,
        training: summary(&extractor.report, extractor.max_epochs),
        meta_training: Some(summary(&model.meta_report, stack_cfg.meta_epochs)),
        diagnostics: Some(Fold2Diagnostics {
            evaluation: "fold2_resubstitution".into(),
            fold1_size: model.fold1.len(),
            fold2_size: model.fold2.len(),
            metrics: metrics.to_vec(),
        }),
        model_seed: extractor.seed,
        audit: entries,
    })
}

/// Reports of a grid plus the union of every fit's provenance record.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub reports: Vec<RunReport>,
    pub audit: AuditLog,
}

impl GridOutcome {
    pub fn completed(&self) -> impl Iterator<Item = &RunReport> {
        self.reports.iter().filter(|r| r.status == RunStatus::Completed)
    }
}

fn corpus_key(config: &ExperimentConfig) -> String {
    serde_json::to_string(&(&config.data, &config.preprocess, &config.stft, config.decimation, config.seed))
        .expect("config serializes")
}

/// Runs every grid cell in order. Corpora and trained extractors are shared
/// between cells; a failing cell is reported and the grid continues.
pub fn run_grid(grid: &GridConfig) -> GridOutcome {
    let runs = grid.expand();
    let cache = RefCell::new(ExtractorCache::default());
    let mut corpora: BTreeMap<String, std::result::Result<Rc<Corpus>, (String, i32)>> = BTreeMap::new();
    let mut reports = Vec::with_capacity(runs.len());
    let mut audit = AuditLog::new();
    for (k, config) in runs.iter().enumerate() {
        let started = Instant::now();
        info!("run {}/{}: {}", k + 1, runs.len(), config.run_id());
        let key = corpus_key(config);
        let needs_stft = runs.iter().any(|r| corpus_key(r) == key && r.extractor.uses_stft());
        let corpus = corpora
            .entry(key.clone())
            .or_insert_with(|| {
                config
                    .validate()
                    .and_then(|_| Corpus::load(config, needs_stft))
                    .map(Rc::new)
                    .map_err(|e| (e.to_string(), e.exit_code()))
            })
            .clone();
        let outcome = match corpus {
            Err((msg, code)) => Err((msg, code)),
            Ok(corpus) => {
                let result = if config.stacked {
                    run_stacked(&key, &corpus, &cache, config)
                } else {
                    run_base(&key, &corpus, &cache, config)
                };
                result.map(|out| (out, corpus)).map_err(|e| (e.to_string(), e.exit_code()))
            }
        };
        let report = match outcome {
            Ok((out, corpus)) => {
                for e in &out.audit {
                    audit.push(e.clone());
                }
                finish(config, &corpus, out, started.elapsed().as_secs_f64())
            }
            Err((message, exit_code)) => {
                warn!("run {} failed: {message}", config.run_id());
                RunReport::failed(config, message, exit_code, started.elapsed().as_secs_f64())
            }
        };
        reports.push(report);
    }
    GridOutcome { reports, audit }
}

fn finish(config: &ExperimentConfig, corpus: &Corpus, out: RunOutput, secs: f64) -> RunReport {
    let metrics = per_class_metrics(&out.predictions, &corpus.test_labels).expect("one prediction per test sample");
    RunReport::completed(config, &out.training, secs)
        .with_metrics(metrics.to_vec(), corpus.train_labels.len(), corpus.test_labels.len())
        .with_stacking(out.meta_training, out.diagnostics)
        .with_provenance(out.model_seed, out.audit)
}

/// One configured run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    config.validate()?;
    let corpus = Corpus::load(config, config.extractor.uses_stft())?;
    let key = corpus_key(config);
    let cache = RefCell::new(ExtractorCache::default());
    let out = if config.stacked {
        run_stacked(&key, &corpus, &cache, config)?
    } else {
        run_base(&key, &corpus, &cache, config)?
    };
    Ok(finish(config, &corpus, out, started.elapsed().as_secs_f64()))
}

/// Trains a single (non-stacked) pipeline and scores it on the test split.
pub fn train_pipeline(config: &ExperimentConfig) -> Result<(Pipeline, RunReport)> {
    if config.stacked {
        return Err(ExperimentError::Config("stacked runs do not produce a single pipeline".into()));
    }
    let started = Instant::now();
    config.validate()?;
    let corpus = Corpus::load(config, config.extractor.uses_stft())?;
    let key = corpus_key(config);
    let cache = RefCell::new(ExtractorCache::default());
    let (pipeline, audit) = fit_base(&key, &corpus, &cache, config)?;
    let out = evaluate(&pipeline, &corpus, config, audit)?;
    Ok((pipeline, finish(config, &corpus, out, started.elapsed().as_secs_f64())))
}

/// Scores a saved pipeline on the configured test split.
pub fn evaluate_pipeline(config: &ExperimentConfig, pipeline: &Pipeline) -> Result<RunReport> {
    if pipeline.extractor.kind != config.extractor {
        return Err(ExperimentError::Config(format!(
            "pipeline holds a {} extractor but the config names {}",
            pipeline.extractor.kind, config.extractor
        )));
    }
    let started = Instant::now();
    config.validate()?;
    let corpus = Corpus::load(config, config.extractor.uses_stft())?;
    let out = evaluate(pipeline, &corpus, config, vec![pipeline.extractor.audit.clone()])?;
    Ok(finish(config, &corpus, out, started.elapsed().as_secs_f64()))
}
