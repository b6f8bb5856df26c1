//! Experiment runner: configuration, the end-to-end pipeline, the model
//! grid and report emission.

mod pipeline;
pub mod report;
pub mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifiers::{ClassifierError, ForestConfig, SvmConfig};
use crate::dataset::DatasetError;
use crate::ensemble::{EnsembleError, StackConfig};
use crate::nn::{Extractor, NnError, TrainConfig};
use crate::preprocess::{PreprocessConfig, PreprocessError};
use crate::provenance::LeakageError;
use crate::spectral::{SpectralError, StftConfig};

pub use pipeline::{
    decimate, evaluate_pipeline, run_experiment, run_grid, stft_input, train_pipeline, Corpus, FittedHead, GridOutcome,
    Pipeline, SampleRef, TrainedExtractor,
};
pub use report::{emit_report, OutputFormat, RunReport, RunStatus, REPORT_SCHEMA, SCHEMA_VERSION};
pub use synth::SynthConfig;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("{context}: {source}")]
    Nn {
        context: String,
        #[source]
        source: NnError,
    },
    #[error("{context}: {source}")]
    Classifier {
        context: String,
        #[source]
        source: ClassifierError,
    },
    #[error("{context}: {source}")]
    Ensemble {
        context: String,
        #[source]
        source: EnsembleError,
    },
    #[error(transparent)]
    Leakage(#[from] LeakageError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// 1 for configuration problems, 2 for data and i/o, 3 for training.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            ExperimentError::Data(_)
            | ExperimentError::Preprocess(_)
            | ExperimentError::Spectral(_)
            | ExperimentError::Io { .. } => 2,
            ExperimentError::Nn { .. }
            | ExperimentError::Classifier { .. }
            | ExperimentError::Ensemble { .. }
            | ExperimentError::Leakage(_) => 3,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| ExperimentError::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Classifier applied to the extractor: its own softmax output, or an SVM or
/// random forest over the tapped features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Softmax,
    Svm,
    Rf,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Softmax, Head::Svm, Head::Rf];

    pub fn name(self) -> &'static str {
        match self {
            Head::Softmax => "softmax",
            Head::Svm => "svm",
            Head::Rf => "rf",
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Head {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Head::ALL.into_iter().find(|h| h.name() == s).ok_or_else(|| format!("unknown head '{s}'"))
    }
}

/// Where segments come from. The built-in generator takes precedence over
/// a manifest when both are set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Subject-level train share for manifest data.
    pub train_fraction: f64,
    pub synthetic: Option<SynthConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: None, train_fraction: 0.7, synthetic: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub stft: StftConfig,
    /// Block-average factor applied before the time-domain extractors.
    pub decimation: usize,
    pub extractor: Extractor,
    pub head: Head,
    pub batch_size: usize,
    /// Overrides the batch-size rule (100 epochs at 16, 300 at 3).
    pub max_epochs: Option<usize>,
    pub stacked: bool,
    pub stack: StackConfig,
    pub forest: ForestConfig,
    pub svm: SvmConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            stft: StftConfig::default(),
            decimation: 10,
            extractor: Extractor::Cnn,
            head: Head::Softmax,
            batch_size: 16,
            max_epochs: None,
            stacked: false,
            stack: StackConfig::default(),
            forest: ForestConfig::default(),
            svm: SvmConfig::default(),
            seed: 42,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.data.synthetic.is_none() && self.data.manifest.is_none() {
            return bad("data needs either a manifest or a synthetic section".into());
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.data.train_fraction));
        }
        if let Some(s) = &self.data.synthetic {
            if s.n_train < 4 || s.n_test < 2 {
                return bad("synthetic corpus needs at least 4 train and 2 test segments".into());
            }
        }
        if self.decimation == 0 || crate::dataset::SEGMENT_LEN % self.decimation != 0 {
            return bad(format!("decimation {} must divide {}", self.decimation, crate::dataset::SEGMENT_LEN));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_epochs == Some(0) {
            return bad("max_epochs must be positive".into());
        }
        if !(self.stack.fold2_fraction > 0.0 && self.stack.fold2_fraction < 1.0) {
            return bad(format!("stack.fold2_fraction {} outside (0, 1)", self.stack.fold2_fraction));
        }
        self.stft.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    /// `<extractor>-<head>-b<batch>`, prefixed with `meta-` when stacked.
    pub fn run_id(&self) -> String {
        let id = format!("{}-{}-b{}", self.extractor, self.head, self.batch_size);
        if self.stacked {
            format!("meta-{id}")
        } else {
            id
        }
    }

    /// Extractor training settings; the seed depends on the extractor and
    /// batch size only, so a grid reproduces single runs exactly.
    pub fn train_config(&self) -> TrainConfig {
        let seed = derive_seed(self.seed, &format!("extractor:{}:b{}", self.extractor, self.batch_size));
        let mut cfg = TrainConfig::for_batch_size(self.batch_size, seed);
        if let Some(e) = self.max_epochs {
            cfg.max_epochs = e;
        }
        cfg
    }
}

/// Independent per-purpose seed: FNV-1a over `label`, mixed with `seed`
/// through the splitmix64 finalizer.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One grid cell; unset fields fall back to the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOverride {
    pub extractor: Extractor,
    pub head: Head,
    pub batch_size: usize,
    #[serde(default)]
    pub stacked: bool,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub extractors: Vec<Extractor>,
    pub heads: Vec<Head>,
    pub batch_sizes: Vec<usize>,
    /// Adds one stacked row per extractor and head.
    pub stacked: bool,
    pub stacked_batch_size: usize,
    /// Explicit cells; when non-empty they replace the product above.
    pub runs: Vec<RunOverride>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            extractors: Extractor::ALL.to_vec(),
            heads: Head::ALL.to_vec(),
            batch_sizes: vec![3, 16],
            stacked: true,
            stacked_batch_size: 16,
            runs: Vec::new(),
        }
    }
}

/// A base config plus the grid of overrides applied to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GridConfig {
    #[serde(flatten)]
    pub base: ExperimentConfig,
    #[serde(default)]
    pub grid: GridSpec,
}

impl GridConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        config.base.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// A grid holding exactly one run.
    pub fn single(config: ExperimentConfig) -> Self {
        let cell = RunOverride {
            extractor: config.extractor,
            head: config.head,
            batch_size: config.batch_size,
            stacked: config.stacked,
            manifest: None,
        };
        Self { base: config, grid: GridSpec { runs: vec![cell], ..GridSpec::default() } }
    }

    /// Base rows ordered by batch size, extractor and head, then stacked rows.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        let with = |e: Extractor, h: Head, b: usize, stacked: bool| ExperimentConfig {
            extractor: e,
            head: h,
            batch_size: b,
            stacked,
            ..self.base.clone()
        };
        if !self.grid.runs.is_empty() {
            return self
                .grid
                .runs
                .iter()
                .map(|r| {
                    let mut c = with(r.extractor, r.head, r.batch_size, r.stacked);
                    if let Some(m) = &r.manifest {
                        c.data.manifest = Some(m.clone());
                        c.data.synthetic = None;
                    }
                    c
                })
                .collect();
        }
        let mut out = Vec::new();
        for &b in &self.grid.batch_sizes {
            for &e in &self.grid.extractors {
                for &h in &self.grid.heads {
                    out.push(with(e, h, b, false));
                }
            }
        }
        if self.grid.stacked {
            for &e in &self.grid.extractors {
                for &h in &self.grid.heads {
                    out.push(with(e, h, self.grid.stacked_batch_size, true));
                }
            }
        }
        out
    }
}
