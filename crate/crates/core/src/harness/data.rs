//! JSON-lines datasets.
//!
//! One example per line:
//! `{"text": [[...] × T_t], "audio": [[...] × T_a], "vision": [[...] × T_v], "label": y}`
//! where every inner array is the feature vector of one time step. Synthetic
//! data additionally records where its cues were planted.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{ModalBundle, Modality};
use crate::tensor::Tensor;

pub const LABEL_MIN: f64 = -3.0;
pub const LABEL_MAX: f64 = 3.0;

/// A planted cue: `sign` is the sentiment polarity it carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cue {
    pub modality: Modality,
    pub position: usize,
    pub sign: i8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub text: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
    pub vision: Vec<Vec<f64>>,
    pub label: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cues: Vec<Cue>,
}

fn to_tensor(m: Modality, steps: &[Vec<f64>]) -> Result<Tensor> {
    let t = steps.len();
    let d = steps.first().map_or(0, Vec::len);
    if t == 0 || d == 0 {
        return Err(Error::Dataset(format!("{m} sequence is empty")));
    }
    let mut data = vec![0.0; d * t];
    for (i, step) in steps.iter().enumerate() {
        if step.len() != d {
            return Err(Error::Dataset(format!(
                "{m} step {i} has {} features, step 0 has {d}",
                step.len()
            )));
        }
        for (f, &v) in step.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Dataset(format!("{m} step {i} holds a non-finite value")));
            }
            data[f * t + i] = v;
        }
    }
    Tensor::new(&[d, t], data)
}

impl Example {
    pub fn steps(&self, m: Modality) -> &[Vec<f64>] {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Vision => &self.vision,
        }
    }

    /// Checks the label range and converts to `d × T` tensors.
    pub fn bundle(&self) -> Result<ModalBundle> {
        if !(LABEL_MIN..=LABEL_MAX).contains(&self.label) {
            return Err(Error::Dataset(format!(
                "label {} outside [{LABEL_MIN}, {LABEL_MAX}]",
                self.label
            )));
        }
        ModalBundle::new(
            to_tensor(Modality::Text, &self.text)?,
            to_tensor(Modality::Audio, &self.audio)?,
            to_tensor(Modality::Vision, &self.vision)?,
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let ex: Example =
            serde_json::from_str(line).map_err(|e| Error::Dataset(e.to_string()))?;
        ex.bundle()?;
        Ok(ex)
    }
}

/// A validated example with its tensors.
#[derive(Clone, Debug)]
pub struct Sample {
    pub bundle: ModalBundle,
    pub label: f64,
    pub cues: Vec<Cue>,
}

impl TryFrom<&Example> for Sample {
    type Error = Error;

    fn try_from(ex: &Example) -> Result<Self> {
        Ok(Sample {
            bundle: ex.bundle()?,
            label: ex.label,
            cues: ex.cues.clone(),
        })
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex = Example::parse_line(line)
            .map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
        out.push(Sample::try_from(&ex)?);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, ex)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Feature dimension of each modality, required to be the same across the
/// set.
pub fn dataset_dims(samples: &[Sample]) -> Result<[usize; 3]> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Dataset("dataset is empty".into()))?;
    let dims = Modality::ALL.map(|m| first.bundle.dim(m));
    for (i, s) in samples.iter().enumerate() {
        let d = Modality::ALL.map(|m| s.bundle.dim(m));
        if d != dims {
            return Err(Error::Dataset(format!(
                "example {i} has feature dimensions {d:?}, example 0 has {dims:?}"
            )));
        }
    }
    Ok(dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_time_major_rows() {
        let s = parse_jsonl(
            r#"{"text":[[1,2],[3,4],[5,6]],"audio":[[1]],"vision":[[0.5,0.5,1]],"label":-1.5}"#,
        )
        .unwrap();
        let t = s[0].bundle.get(Modality::Text);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
        assert_eq!(s[0].label, -1.5);
    }

    #[test]
    fn rejects_bad_examples() {
        let bad = [
            r#"{"text":[[1]],"audio":[[1]],"vision":[[1]],"label":3.5}"#,
            r#"{"text":[],"audio":[[1]],"vision":[[1]],"label":0}"#,
            r#"{"text":[[1],[1,2]],"audio":[[1]],"vision":[[1]],"label":0}"#,
            r#"{"text":[[1]],"audio":[[1]],"vision":[[1]]}"#,
            r#"{"text":[[1]],"audio":[[1]],"vision":[[1]],"label":0,"extra":1}"#,
        ];
        for line in bad {
            assert!(parse_jsonl(line).is_err(), "{line}");
        }
    }
}
