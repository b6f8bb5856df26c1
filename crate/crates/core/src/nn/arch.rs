//! The five feature extractors, with layer counts 12, 5, 12, 9 and 11.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layers::ActivationKind::{Relu, Softmax};
use super::model::{LayerSpec, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    Cnn,
    Lstm,
    Bilstm,
    LstmCnn,
    StftCnn,
}

impl Extractor {
    pub const ALL: [Extractor; 5] =
        [Extractor::Cnn, Extractor::Lstm, Extractor::Bilstm, Extractor::LstmCnn, Extractor::StftCnn];

    pub fn name(self) -> &'static str {
        match self {
            Extractor::Cnn => "cnn",
            Extractor::Lstm => "lstm",
            Extractor::Bilstm => "bilstm",
            Extractor::LstmCnn => "lstm_cnn",
            Extractor::StftCnn => "stft_cnn",
        }
    }

    pub fn uses_stft(self) -> bool {
        self == Extractor::StftCnn
    }

    pub fn layer_count(self) -> usize {
        match self {
            Extractor::Cnn | Extractor::Bilstm => 12,
            Extractor::Lstm => 5,
            Extractor::StftCnn => 9,
            Extractor::LstmCnn => 11,
        }
    }
}

impl fmt::Display for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Extractor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Extractor::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown extractor '{s}'"))
    }
}

fn conv(filters: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv1d { filters, kernel, stride: 1, padding: 0 }
}

fn relu() -> LayerSpec {
    LayerSpec::Activation { kind: Relu }
}

fn pool2() -> LayerSpec {
    LayerSpec::MaxPool { window: 2, stride: None }
}

fn dense(units: usize, relu: bool) -> LayerSpec {
    LayerSpec::Dense { units, activation: relu.then_some(Relu) }
}

fn dropout() -> LayerSpec {
    LayerSpec::Dropout { rate: 0.3 }
}

/// Default layer stack. `input_shape` is `[channels, length]`: `[1, L]` for
/// time-domain inputs, `[bins, frames]` for spectrograms.
pub fn architecture(kind: Extractor, input_shape: [usize; 2]) -> ModelSpec {
    use LayerSpec::{BatchNorm, GlobalAvgPool};
    let layers = match kind {
        Extractor::Cnn => vec![
            conv(32, 5),
            BatchNorm,
            relu(),
            pool2(),
            conv(64, 5),
            BatchNorm,
            relu(),
            pool2(),
            GlobalAvgPool,
            dense(64, true),
            dropout(),
            dense(2, false),
        ],
        Extractor::Lstm => vec![
            LayerSpec::Lstm { hidden: 64, return_sequences: false },
            dropout(),
            dense(32, true),
            dense(2, false),
            LayerSpec::Activation { kind: Softmax },
        ],
        Extractor::Bilstm => vec![
            LayerSpec::Bilstm { hidden: 64, return_sequences: true },
            BatchNorm,
            relu(),
            pool2(),
            conv(64, 5),
            BatchNorm,
            relu(),
            pool2(),
            GlobalAvgPool,
            dense(64, true),
            dropout(),
            dense(2, false),
        ],
        Extractor::LstmCnn => vec![
            conv(32, 5),
            BatchNorm,
            relu(),
            pool2(),
            conv(64, 5),
            BatchNorm,
            relu(),
            pool2(),
            LayerSpec::Lstm { hidden: 64, return_sequences: false },
            dense(32, true),
            dense(2, false),
        ],
        Extractor::StftCnn => vec![
            conv(32, 3),
            BatchNorm,
            relu(),
            conv(64, 3),
            BatchNorm,
            relu(),
            GlobalAvgPool,
            dense(32, true),
            dense(2, false),
        ],
    };
    ModelSpec { input_shape: input_shape.to_vec(), layers }
}
