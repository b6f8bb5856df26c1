//! Dataset ingestion: manifest parsing, segment loading, blood-pressure
//! staging and subject-level train/test splitting.
//!
//! The manifest is a plain CSV with the header
//! `subject_id,segment_index,sample_file,sbp_mmhg,dbp_mmhg`. Each row points
//! at a text file holding exactly [`SEGMENT_LEN`] whitespace-separated
//! samples recorded at [`SAMPLE_RATE_HZ`]. Relative sample paths are resolved
//! against the manifest's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Samples per PPG segment (2.1 s at 1 kHz).
pub const SEGMENT_LEN: usize = 2100;
pub const SAMPLE_RATE_HZ: f64 = 1000.0;

pub const MANIFEST_HEADER: [&str; 5] =
    ["subject_id", "segment_index", "sample_file", "sbp_mmhg", "dbp_mmhg"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("invalid blood pressure (sbp={sbp}, dbp={dbp}): need sbp > dbp > 0")]
    InvalidBp { sbp: f64, dbp: f64 },
    #[error("segment has {0} samples, expected {SEGMENT_LEN}")]
    WrongLength(usize),
    #[error("non-numeric token {token:?} in {path}")]
    NonNumericToken { path: PathBuf, token: String },
    #[error("need at least 2 distinct subjects on each side of the split, found {0} subjects")]
    TooFewSubjects(usize),
    #[error("train fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Blood-pressure category, ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HypertensionStage {
    Normal,
    Prehypertension,
    Stage1,
    Stage2,
}

/// The two classes the classifiers predict.
///
/// `PreHypertension` has index 0 and `Hypertension` index 1; that ordering
/// is used for one-hot targets, probability vectors and tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BinaryClass {
    PreHypertension,
    Hypertension,
}

impl BinaryClass {
    pub const ALL: [BinaryClass; 2] = [BinaryClass::PreHypertension, BinaryClass::Hypertension];

    pub fn index(self) -> usize {
        match self {
            BinaryClass::PreHypertension => 0,
            BinaryClass::Hypertension => 1,
        }
    }

    pub fn from_index(index: usize) -> Self {
        if index == 0 {
            BinaryClass::PreHypertension
        } else {
            BinaryClass::Hypertension
        }
    }

    pub fn other(self) -> Self {
        Self::from_index(1 - self.index())
    }

    /// SVM label convention: Hypertension is +1.
    pub fn sign(self) -> f64 {
        match self {
            BinaryClass::PreHypertension => -1.0,
            BinaryClass::Hypertension => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryClass::PreHypertension => "PreHypertension",
            BinaryClass::Hypertension => "Hypertension",
        }
    }
}

impl fmt::Display for BinaryClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub subject_id: String,
    pub segment_index: u32,
    pub sample_path: PathBuf,
    pub sbp: f64,
    pub dbp: f64,
    pub stage: HypertensionStage,
    pub label: BinaryClass,
}

impl SegmentRecord {
    pub fn new(
        subject_id: impl Into<String>,
        segment_index: u32,
        sample_path: impl Into<PathBuf>,
        sbp: f64,
        dbp: f64,
    ) -> Result<Self> {
        let stage = derive_stage(sbp, dbp)?;
        Ok(Self {
            subject_id: subject_id.into(),
            segment_index,
            sample_path: sample_path.into(),
            sbp,
            dbp,
            stage,
            label: binarize(stage),
        })
    }

    /// Stable identifier `subject:segment`.
    pub fn key(&self) -> String {
        format!("{}:{}", self.subject_id, self.segment_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpgSegment {
    pub samples: Vec<f64>,
    pub sample_rate_hz: f64,
    pub record: SegmentRecord,
}

impl PpgSegment {
    /// Validates length and finiteness.
    pub fn new(samples: Vec<f64>, record: SegmentRecord) -> Result<Self> {
        if samples.len() != SEGMENT_LEN {
            return Err(DatasetError::WrongLength(samples.len()));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(DatasetError::NonNumericToken {
                path: record.sample_path.clone(),
                token: bad.to_string(),
            });
        }
        Ok(Self {
            samples,
            sample_rate_hz: SAMPLE_RATE_HZ,
            record,
        })
    }
}

/// JNC7 staging: the most severe category triggered by either pressure wins.
pub fn derive_stage(sbp: f64, dbp: f64) -> Result<HypertensionStage> {
    if !(sbp.is_finite() && dbp.is_finite()) || dbp <= 0.0 || sbp <= dbp {
        return Err(DatasetError::InvalidBp { sbp, dbp });
    }
    let stage = if sbp >= 160.0 || dbp >= 100.0 {
        HypertensionStage::Stage2
    } else if sbp >= 140.0 || dbp >= 90.0 {
        HypertensionStage::Stage1
    } else if sbp >= 120.0 || dbp >= 80.0 {
        HypertensionStage::Prehypertension
    } else {
        HypertensionStage::Normal
    };
    Ok(stage)
}

pub fn binarize(stage: HypertensionStage) -> BinaryClass {
    match stage {
        HypertensionStage::Normal | HypertensionStage::Prehypertension => {
            BinaryClass::PreHypertension
        }
        HypertensionStage::Stage1 | HypertensionStage::Stage2 => BinaryClass::Hypertension,
    }
}

/// Parses the manifest CSV. Sample paths are returned resolved against the
/// manifest's parent directory.
pub fn load_manifest(path: &Path) -> Result<Vec<SegmentRecord>> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_or_malformed(path, e, 1))?;

    let header = reader
        .headers()
        .map_err(|e| io_or_malformed(path, e, 1))?
        .clone();
    let found: Vec<&str> = header.iter().collect();
    if found != MANIFEST_HEADER {
        return Err(DatasetError::MalformedRow {
            line: 1,
            reason: format!("expected header {:?}, found {:?}", MANIFEST_HEADER, found),
        });
    }

    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let line = row + 2;
        let fields = result.map_err(|e| io_or_malformed(path, e, line))?;
        if fields.len() != MANIFEST_HEADER.len() {
            return Err(DatasetError::MalformedRow {
                line,
                reason: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let malformed = |reason: String| DatasetError::MalformedRow { line, reason };

        let subject_id = fields[0].to_string();
        if subject_id.is_empty() {
            return Err(malformed("empty subject_id".into()));
        }
        let segment_index: u32 = fields[1]
            .parse()
            .ok()
            .filter(|&i| i >= 1)
            .ok_or_else(|| malformed(format!("bad segment_index {:?}", &fields[1])))?;
        if fields[2].is_empty() {
            return Err(malformed("empty sample_file".into()));
        }
        let sample_path = base.join(&fields[2]);
        let sbp = parse_pressure(&fields[3]).ok_or_else(|| malformed(format!("bad sbp {:?}", &fields[3])))?;
        let dbp = parse_pressure(&fields[4]).ok_or_else(|| malformed(format!("bad dbp {:?}", &fields[4])))?;

        records.push(SegmentRecord::new(subject_id, segment_index, sample_path, sbp, dbp)?);
    }
    Ok(records)
}

fn parse_pressure(token: &str) -> Option<f64> {
    token.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn io_or_malformed(path: &Path, err: csv::Error, line: usize) -> DatasetError {
    let line = err.position().map(|p| p.line() as usize).unwrap_or(line);
    match err.into_kind() {
        csv::ErrorKind::Io(source) => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DatasetError::MalformedRow {
            line,
            reason: format!("{other:?}"),
        },
    }
}

/// Reads a whitespace-separated sample file; exactly [`SEGMENT_LEN`] finite
/// values are required.
pub fn read_samples(path: &Path) -> Result<Vec<f64>> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut samples = Vec::with_capacity(SEGMENT_LEN);
    for token in text.split_whitespace() {
        match token.parse::<f64>() {
            Ok(v) if v.is_finite() => samples.push(v),
            _ => {
                return Err(DatasetError::NonNumericToken {
                    path: path.to_path_buf(),
                    token: token.to_string(),
                })
            }
        }
    }
    if samples.len() != SEGMENT_LEN {
        return Err(DatasetError::WrongLength(samples.len()));
    }
    Ok(samples)
}

pub fn load_segment(record: &SegmentRecord) -> Result<PpgSegment> {
    let samples = read_samples(&record.sample_path)?;
    PpgSegment::new(samples, record.clone())
}

/// Loads every segment listed in a manifest. Any missing or invalid file
/// fails the whole load.
pub fn load_dataset(manifest: &Path) -> Result<Vec<PpgSegment>> {
    let records = load_manifest(manifest)?;
    let segments = records
        .iter()
        .map(load_segment)
        .collect::<Result<Vec<_>>>()?;
    let subjects: BTreeSet<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
    let hyper = segments
        .iter()
        .filter(|s| s.record.label == BinaryClass::Hypertension)
        .count();
    info!(
        "loaded {} segments from {} subjects ({} hypertension, {} pre-hypertension)",
        segments.len(),
        subjects.len(),
        hyper,
        segments.len() - hyper
    );
    Ok(segments)
}

/// Which side of the train/test split a subject landed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub train_fraction: f64,
}

impl SplitPlan {
    pub fn is_train(&self, subject_id: &str) -> bool {
        self.train.binary_search_by(|s| s.as_str().cmp(subject_id)).is_ok()
    }

    pub fn is_test(&self, subject_id: &str) -> bool {
        self.test.binary_search_by(|s| s.as_str().cmp(subject_id)).is_ok()
    }
}

/// Seeded subject-level split; every segment of a subject stays on one side.
pub fn split_subjects(records: &[SegmentRecord], train_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }
    let subjects: BTreeSet<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
    let n = subjects.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n < 2 || n_train == 0 || n_train == n {
        return Err(DatasetError::TooFewSubjects(n));
    }

    let mut order: Vec<String> = subjects.into_iter().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut test = order.split_off(n_train);
    let mut train = order;
    train.sort();
    test.sort();

    let train_segments = records.iter().filter(|r| train.binary_search(&r.subject_id).is_ok()).count();
    info!(
        "split {} subjects -> {} train / {} test ({} / {} segments)",
        n,
        train.len(),
        test.len(),
        train_segments,
        records.len() - train_segments
    );
    Ok(SplitPlan {
        train,
        test,
        seed,
        train_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_manifest(dir: &Path, rows: &[&str]) -> PathBuf {
        let path = dir.join("manifest.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "{}", MANIFEST_HEADER.join(",")).unwrap();
        for row in rows {
            writeln!(f, "{row}").unwrap();
        }
        path
    }

    fn write_samples(path: &Path, values: &[String]) {
        std::fs::write(path, values.join("\n")).unwrap();
    }

    #[test]
    fn staging_examples() {
        assert_eq!(derive_stage(110.0, 70.0).unwrap(), HypertensionStage::Normal);
        assert_eq!(derive_stage(145.0, 85.0).unwrap(), HypertensionStage::Stage1);
        assert_eq!(derive_stage(125.0, 102.0).unwrap(), HypertensionStage::Stage2);
        assert_eq!(derive_stage(130.0, 70.0).unwrap(), HypertensionStage::Prehypertension);
        assert!(matches!(derive_stage(80.0, 120.0), Err(DatasetError::InvalidBp { .. })));
        assert!(matches!(derive_stage(120.0, 0.0), Err(DatasetError::InvalidBp { .. })));
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(HypertensionStage::Normal), BinaryClass::PreHypertension);
        assert_eq!(binarize(HypertensionStage::Prehypertension), BinaryClass::PreHypertension);
        assert_eq!(binarize(HypertensionStage::Stage1), BinaryClass::Hypertension);
        assert_eq!(binarize(HypertensionStage::Stage2), BinaryClass::Hypertension);
    }

    #[test]
    fn header_only_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &[]);
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn manifest_rejects_inverted_pressures() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &["s1,1,a.txt,80,120"]);
        assert!(matches!(load_manifest(&path), Err(DatasetError::InvalidBp { .. })));
    }

    #[test]
    fn manifest_reports_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &["s1,1,a.txt,120,80", "s2,x,b.txt,120,80"]);
        match load_manifest(&path) {
            Err(DatasetError::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "subject,segment,file,sbp,dbp\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(DatasetError::MalformedRow { line: 1, .. })));
    }

    #[test]
    fn missing_manifest() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/manifest.csv")),
            Err(DatasetError::MissingFile(_))
        ));
    }

    #[test]
    fn segment_length_and_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.txt");
        write_samples(&ok, &(0..SEGMENT_LEN).map(|i| format!("{}", i as f64 * 0.5)).collect::<Vec<_>>());
        assert_eq!(read_samples(&ok).unwrap().len(), SEGMENT_LEN);

        let short = dir.path().join("short.txt");
        write_samples(&short, &(0..2099).map(|i| i.to_string()).collect::<Vec<_>>());
        assert!(matches!(read_samples(&short), Err(DatasetError::WrongLength(2099))));

        let nan = dir.path().join("nan.txt");
        let mut values: Vec<String> = (0..SEGMENT_LEN).map(|i| i.to_string()).collect();
        values[17] = "NaN".into();
        write_samples(&nan, &values);
        assert!(matches!(read_samples(&nan), Err(DatasetError::NonNumericToken { .. })));

        assert!(matches!(
            read_samples(&dir.path().join("absent.txt")),
            Err(DatasetError::MissingFile(_))
        ));
    }

    #[test]
    fn dataset_load_fails_fast_on_missing_segment() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("a.txt");
        write_samples(&ok, &vec!["1.0".to_string(); SEGMENT_LEN]);
        let path = write_manifest(dir.path(), &["s1,1,a.txt,120,80", "s1,2,missing.txt,120,80"]);
        assert!(matches!(load_dataset(&path), Err(DatasetError::MissingFile(_))));
    }

    #[test]
    fn reload_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &["s1,1,a.txt,120,80", "s2,1,b.txt,150.5,95"]);
        let a = load_manifest(&path).unwrap();
        let b = load_manifest(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[1].stage, HypertensionStage::Stage1);
        assert_eq!(a[0].sample_path, dir.path().join("a.txt"));
    }

    fn records_for(subjects: usize, per_subject: u32) -> Vec<SegmentRecord> {
        (0..subjects)
            .flat_map(|s| {
                (1..=per_subject).map(move |i| {
                    SegmentRecord::new(format!("{s:03}"), i, format!("{s}_{i}.txt"), 130.0, 85.0).unwrap()
                })
            })
            .collect()
    }

    #[test]
    fn split_cardinality_and_determinism() {
        let records = records_for(10, 3);
        let a = split_subjects(&records, 0.7, 42).unwrap();
        let b = split_subjects(&records, 0.7, 42).unwrap();
        assert_eq!(a.train.len(), 7);
        assert_eq!(a.test.len(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn split_needs_two_subjects() {
        let records = records_for(1, 3);
        assert!(matches!(split_subjects(&records, 0.7, 1), Err(DatasetError::TooFewSubjects(1))));
        assert!(matches!(split_subjects(&records, 1.0, 1), Err(DatasetError::InvalidFraction(_))));
    }

    proptest! {
        #[test]
        fn split_has_no_overlap(subjects in 2usize..60, frac in 0.2f64..0.8, seed in any::<u64>()) {
            let records = records_for(subjects, 2);
            if let Ok(plan) = split_subjects(&records, frac, seed) {
                prop_assert_eq!(plan.train.len() + plan.test.len(), subjects);
                prop_assert_eq!(plan.train.len(), (frac * subjects as f64).round() as usize);
                for s in &plan.train {
                    prop_assert!(!plan.is_test(s));
                }
                for r in &records {
                    prop_assert!(plan.is_train(&r.subject_id) ^ plan.is_test(&r.subject_id));
                }
            }
        }

        #[test]
        fn staging_is_monotone(dbp in 40.0f64..130.0, gap in 1.0f64..100.0, bump_s in 0.0f64..40.0, bump_d in 0.0f64..20.0) {
            let sbp = dbp + gap;
            let base = derive_stage(sbp, dbp).unwrap();
            let raised = derive_stage(sbp + bump_s + bump_d, dbp + bump_d).unwrap();
            prop_assert!(raised >= base);
            let class = binarize(base);
            prop_assert!(class == BinaryClass::PreHypertension || class == BinaryClass::Hypertension);
        }
    }
}
