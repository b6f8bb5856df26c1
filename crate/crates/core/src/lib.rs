//! Photoplethysmogram (PPG) classification into pre-hypertension and
//! hypertension.
//!
//! The crate covers the whole chain: dataset ingestion and staging,
//! signal conditioning, STFT and FastICA front-ends, a small from-scratch
//! neural-network engine (conv1d, batch-norm, pooling, dense, dropout,
//! LSTM/BiLSTM, Adam), SVM and random-forest heads, stacked ensembles,
//! per-class metrics and an experiment runner.

pub mod classifiers;
pub mod dataset;
pub mod ensemble;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod provenance;
pub mod spectral;
