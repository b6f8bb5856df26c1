use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use ppgbp::dataset;
use ppgbp::experiment::report::{format_table, load_reports};
use ppgbp::experiment::synth::write_corpus;
use ppgbp::experiment::{
    emit_report, evaluate_pipeline, run_experiment, run_grid, train_pipeline, ExperimentConfig,
    ExperimentError, GridConfig, Head, OutputFormat, Pipeline, RunReport, RunStatus, SynthConfig,
};
use ppgbp::nn::Extractor;
use ppgbp::preprocess::Preprocessor;
use ppgbp::spectral::{log_magnitude, Stft};

#[derive(Parser)]
#[command(name = "ppgbp", version, about = "PPG blood-pressure classification experiments")]
struct Cli {
    /// TOML experiment (or grid) configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "json")]
    format: OutputFormat,
    /// Use the built-in synthetic corpus instead of a manifest.
    #[arg(long, global = true)]
    synthetic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    extractor: Option<Extractor>,
    #[arg(long)]
    head: Option<Head>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a manifest, then print the subject split.
    Ingest(RunArgs),
    /// Write preprocessed signals and spectrograms as CSV.
    Preprocess {
        #[command(flatten)]
        run: RunArgs,
        /// Number of segments to dump.
        #[arg(long, default_value_t = 5)]
        limit: usize,
    },
    /// Train one pipeline, save it and report its test metrics.
    Train(RunArgs),
    /// Score a saved pipeline on the test split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        pipeline: PathBuf,
    },
    /// Run the model grid.
    Grid,
    /// Run one stacked (meta-learner) configuration.
    Stack(RunArgs),
    /// Re-emit saved JSON reports in the chosen format and print a table.
    Report {
        /// Directory holding `<run_id>.json` reports; defaults to --out.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write the synthetic corpus as a manifest plus sample files.
    Synth {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
}

fn load_config(cli: &Cli, run: &RunArgs) -> Result<ExperimentConfig, ExperimentError> {
    let mut config = match &cli.config {
        Some(path) => GridConfig::load(path)?.base,
        None => ExperimentConfig::default(),
    };
    apply_overrides(cli, run, &mut config);
    config.validate()?;
    Ok(config)
}

fn apply_overrides(cli: &Cli, run: &RunArgs, config: &mut ExperimentConfig) {
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(m) = &run.manifest {
        config.data.manifest = Some(m.clone());
        config.data.synthetic = None;
    }
    if cli.synthetic && config.data.synthetic.is_none() {
        config.data.synthetic = Some(SynthConfig::default());
    }
    if let Some(e) = run.extractor {
        config.extractor = e;
    }
    if let Some(h) = run.head {
        config.head = h;
    }
    if let Some(b) = run.batch_size {
        config.batch_size = b;
    }
    if run.max_epochs.is_some() {
        config.max_epochs = run.max_epochs;
    }
}

fn write(path: &Path, text: &str) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| ExperimentError::Io { path: parent.into(), source })?;
    }
    std::fs::write(path, text).map_err(|source| ExperimentError::Io { path: path.into(), source })
}

fn emit(reports: &[RunReport], cli: &Cli, dir: &Path) -> Result<(), ExperimentError> {
    for p in emit_report(reports, cli.format, dir)? {
        info!("wrote {}", p.display());
    }
    print!("{}", format_table(reports));
    Ok(())
}

fn ingest(config: &ExperimentConfig) -> Result<(), ExperimentError> {
    let Some(manifest) = &config.data.manifest else {
        let s = config.data.synthetic.clone().unwrap_or_default();
        println!("synthetic corpus: {} train, {} test segments", s.n_train, s.n_test);
        return Ok(());
    };
    let segments = dataset::load_dataset(manifest)?;
    let records: Vec<_> = segments.iter().map(|s| s.record.clone()).collect();
    let plan = dataset::split_subjects(&records, config.data.train_fraction, config.seed)?;
    let train = records.iter().filter(|r| plan.is_train(&r.subject_id)).count();
    println!("segments: {}", records.len());
    println!("subjects: {} train, {} test", plan.train.len(), plan.test.len());
    println!("segments: {train} train, {} test", records.len() - train);
    for c in dataset::BinaryClass::ALL {
        println!("{}: {}", c.name(), records.iter().filter(|r| r.label == c).count());
    }
    Ok(())
}

fn preprocess(config: &ExperimentConfig, limit: usize) -> Result<(), ExperimentError> {
    let segments = match (&config.data.synthetic, &config.data.manifest) {
        (Some(s), _) => ppgbp::experiment::synth::synth_segments(limit.min(s.n_train + s.n_test), 0, s),
        (None, Some(m)) => dataset::load_dataset(m)?.into_iter().take(limit).collect(),
        (None, None) => return Err(ExperimentError::Config("no data source configured".into())),
    };
    let pre = Preprocessor::new(config.preprocess.clone())?;
    let stft = Stft::new(config.stft)?;
    let dir = config.output_dir.join("preprocess");
    for s in &segments {
        let x = pre.apply(&s.samples)?;
        let name = s.record.key().replace(['/', ':'], "_");
        let mut csv = String::from("index,raw,processed\n");
        for (i, (r, p)) in s.samples.iter().zip(&x).enumerate() {
            csv.push_str(&format!("{i},{r},{p}\n"));
        }
        write(&dir.join(format!("{name}.signal.csv")), &csv)?;
        let spec = log_magnitude(&stft.transform(&x, s.sample_rate_hz)?);
        write(&dir.join(format!("{name}.spectrogram.csv")), &spec.to_csv())?;
    }
    println!("wrote {} segments to {}", segments.len(), dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<i32, ExperimentError> {
    match &cli.command {
        Command::Ingest(run) => ingest(&load_config(cli, run)?).map(|_| 0),
        Command::Preprocess { run, limit } => preprocess(&load_config(cli, run)?, *limit).map(|_| 0),
        Command::Train(run) => {
            let config = load_config(cli, run)?;
            let (pipeline, report) = train_pipeline(&config)?;
            let path = config.output_dir.join("models").join(format!("{}.pipeline.json", report.run_id));
            write(&path, &pipeline.to_json()?)?;
            info!("saved pipeline to {}", path.display());
            emit(&[report], cli, &config.output_dir).map(|_| 0)
        }
        Command::Evaluate { run, pipeline } => {
            let config = load_config(cli, run)?;
            let text = std::fs::read_to_string(pipeline)
                .map_err(|source| ExperimentError::Io { path: pipeline.clone(), source })?;
            let pipeline = Pipeline::from_json(&text)?;
            let mut config = config;
            config.extractor = pipeline.extractor.kind;
            config.head = pipeline.head.head();
            let report = evaluate_pipeline(&config, &pipeline)?;
            emit(&[report], cli, &config.output_dir).map(|_| 0)
        }
        Command::Stack(run) => {
            let mut config = load_config(cli, run)?;
            config.stacked = true;
            let report = run_experiment(&config)?;
            emit(&[report], cli, &config.output_dir).map(|_| 0)
        }
        Command::Grid => {
            let mut grid = match &cli.config {
                Some(path) => GridConfig::load(path)?,
                None => GridConfig::default(),
            };
            apply_overrides(cli, &RunArgs::default(), &mut grid.base);
            grid.base.validate()?;
            let outcome = run_grid(&grid);
            emit(&outcome.reports, cli, &grid.base.output_dir)?;
            let worst = outcome
                .reports
                .iter()
                .filter_map(|r| match r.status {
                    RunStatus::Failed { exit_code, .. } => Some(exit_code),
                    RunStatus::Completed => None,
                })
                .max();
            Ok(worst.unwrap_or(0))
        }
        Command::Report { input } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let reports = load_reports(input.as_ref().unwrap_or(&out))?;
            if reports.is_empty() {
                return Err(ExperimentError::Config("no reports found".into()));
            }
            emit(&reports, cli, &out).map(|_| 0)
        }
        Command::Synth { n_train, n_test } => {
            let mut s = SynthConfig::default();
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            s.n_train = n_train.unwrap_or(s.n_train);
            s.n_test = n_test.unwrap_or(s.n_test);
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("synthetic"));
            let manifest = write_corpus(&dir, &s)?;
            println!("{}", manifest.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
