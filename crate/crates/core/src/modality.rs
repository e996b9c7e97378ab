use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Vision,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Vision];

    pub fn index(self) -> usize {
        self as usize
    }

    /// One-letter tag used in parameter names.
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Audio => "a",
            Modality::Vision => "v",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Vision => "vision",
        }
    }

    /// The two source modalities whose cross-modal outputs are concatenated
    /// into this target, in concatenation order.
    pub fn sources(self) -> [Modality; 2] {
        match self {
            Modality::Text => [Modality::Vision, Modality::Audio],
            Modality::Audio => [Modality::Text, Modality::Vision],
            Modality::Vision => [Modality::Text, Modality::Audio],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t" | "text" => Ok(Modality::Text),
            "a" | "audio" => Ok(Modality::Audio),
            "v" | "vision" => Ok(Modality::Vision),
            _ => Err(Error::InvalidArgument(format!("unknown modality {s:?}"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The three raw unimodal sequences of one example, each `d^m × T^m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalBundle {
    seqs: [Tensor; 3],
}

impl ModalBundle {
    pub fn new(text: Tensor, audio: Tensor, vision: Tensor) -> Result<Self> {
        let seqs = [text, audio, vision];
        for (m, s) in Modality::ALL.iter().zip(&seqs) {
            match s.shape() {
                [d, t] if *d > 0 && *t > 0 => {}
                shape => {
                    return Err(Error::Shape(format!(
                        "{m} sequence must be a non-empty d × T matrix, got {shape:?}"
                    )))
                }
            }
        }
        Ok(Self { seqs })
    }

    pub fn get(&self, m: Modality) -> &Tensor {
        &self.seqs[m.index()]
    }

    pub fn dim(&self, m: Modality) -> usize {
        self.seqs[m.index()].shape()[0]
    }

    pub fn len(&self, m: Modality) -> usize {
        self.seqs[m.index()].shape()[1]
    }
}
