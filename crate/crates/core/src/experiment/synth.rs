//! Built-in two-class corpus: PPG-like pulse trains whose beat rate depends
//! on the class.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, BinaryClass, DatasetError, PpgSegment, SegmentRecord, SAMPLE_RATE_HZ, SEGMENT_LEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Beat-rate range in Hz for PreHypertension segments.
    pub pre_hz: [f64; 2],
    /// Beat-rate range in Hz for Hypertension segments.
    pub hyper_hz: [f64; 2],
    /// Standard deviation of additive white noise, relative to pulse height.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_train: 400, n_test: 200, seed: 7, pre_hz: [0.8, 1.2], hyper_hz: [2.6, 3.2], noise: 0.05 }
    }
}

fn gaussian(t: f64, centre: f64, width: f64) -> f64 {
    let z = (t - centre) / width;
    (-0.5 * z * z).exp()
}

/// One segment: systolic peak plus a dicrotic wave each beat, slow baseline
/// wander, random gain and offset, white noise.
pub fn synth_samples(class: BinaryClass, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [lo, hi] = match class {
        BinaryClass::PreHypertension => config.pre_hz,
        BinaryClass::Hypertension => config.hyper_hz,
    };
    let rate = rng.random_range(lo..hi);
    let period = 1.0 / rate;
    let phase = rng.random_range(0.0..period);
    let dicrotic = rng.random_range(0.3..0.6);
    let gain = rng.random_range(0.5..2.0);
    let offset = rng.random_range(-1.0..1.0);
    let wander_amp = rng.random_range(0.0..0.3);
    let wander_hz = rng.random_range(0.1..0.3);
    let wander_phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, config.noise).expect("finite noise level");

    (0..SEGMENT_LEN)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE_HZ;
            // Position within the current beat, in seconds.
            let u = (t + phase).rem_euclid(period);
            let beat = gaussian(u, 0.15 * period, 0.07 * period)
                + dicrotic * gaussian(u, 0.5 * period, 0.1 * period)
                + gaussian(u, 1.15 * period, 0.07 * period);
            let wander = wander_amp * (2.0 * PI * wander_hz * t + wander_phase).sin();
            offset + gain * (beat + wander + noise.sample(rng))
        })
        .collect()
}

fn record(i: usize, class: BinaryClass) -> SegmentRecord {
    let (sbp, dbp) = match class {
        BinaryClass::PreHypertension => (115.0, 75.0),
        BinaryClass::Hypertension => (150.0, 95.0),
    };
    let subject = format!("synth-{i:04}");
    let path = format!("{subject}.txt");
    SegmentRecord::new(subject, 1, path, sbp, dbp).expect("fixed pressures are valid")
}

/// Every segment `i` uses its own generator stream, so a corpus prefix does
/// not depend on the corpus size. Labels alternate.
pub fn synth_segments(n: usize, offset: usize, config: &SynthConfig) -> Vec<PpgSegment> {
    (offset..offset + n)
        .map(|i| {
            let class = if i % 2 == 0 { BinaryClass::PreHypertension } else { BinaryClass::Hypertension };
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let samples = synth_samples(class, config, &mut rng);
            PpgSegment::new(samples, record(i, class)).expect("generator emits full finite segments")
        })
        .collect()
}

/// `(train, test)` with `n_train` and `n_test` segments, one subject each.
pub fn synth_corpus(config: &SynthConfig) -> (Vec<PpgSegment>, Vec<PpgSegment>) {
    (synth_segments(config.n_train, 0, config), synth_segments(config.n_test, config.n_train, config))
}

/// Writes train and test segments as a manifest plus sample files in `dir`.
pub fn write_corpus(dir: &Path, config: &SynthConfig) -> Result<std::path::PathBuf, DatasetError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let manifest = dir.join("manifest.csv");
    let mut out = String::new();
    out.push_str(&dataset::MANIFEST_HEADER.join(","));
    out.push('\n');
    let segments = synth_segments(config.n_train + config.n_test, 0, config);
    for s in &segments {
        let r = &s.record;
        let path = dir.join(&r.sample_path);
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io(&path))?);
        for v in &s.samples {
            writeln!(f, "{v:.9}").map_err(io(&path))?;
        }
        f.flush().map_err(io(&path))?;
        out.push_str(&format!("{},{},{},{},{}\n", r.subject_id, r.segment_index, r.sample_path.display(), r.sbp, r.dbp));
    }
    std::fs::write(&manifest, out).map_err(io(&manifest))?;
    Ok(manifest)
}
