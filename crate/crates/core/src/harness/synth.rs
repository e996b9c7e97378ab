//! Synthetic long-range sentiment task.
//!
//! Every example hides two cues in two different modalities at independent
//! uniformly random time steps. A cue overwrites channels 0 and 1 of its step
//! with `(a, s·a)` for amplitude `a` and polarity `s ∈ {−1, +1}`; every other
//! value is Gaussian background noise (zero by default). The label is
//! `s₁·s₂·(1.5 + u)` with `u ~ U(−0.3, 0.3)`, so neither cue alone says
//! anything about the label.
//!
//! The default amplitude is large on purpose: position codes are added to
//! every step before the first layer norm, and a cue much weaker than them
//! is hard to pick out of a 150 step source.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{write_jsonl, Cue, Example};
use crate::error::{Error, Result};
use crate::modality::Modality;

pub const MIN_SPLIT: usize = 10;

/// Generation parameters; read from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub d_text: usize,
    pub d_audio: usize,
    pub d_vision: usize,
    pub min_len_text: usize,
    pub max_len_text: usize,
    pub min_len_audio: usize,
    pub max_len_audio: usize,
    pub min_len_vision: usize,
    pub max_len_vision: usize,
    pub cue_amplitude: f64,
    pub noise_std: f64,
    pub label_noise: f64,
    /// `"random"` (a random pair of modalities per example) or a fixed pair
    /// such as `"text,vision"`.
    pub cue_modalities: String,
    /// Decimal places kept when writing features.
    pub decimals: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 200,
            test: 500,
            d_text: 10,
            d_audio: 8,
            d_vision: 8,
            min_len_text: 20,
            max_len_text: 20,
            min_len_audio: 120,
            max_len_audio: 120,
            min_len_vision: 150,
            max_len_vision: 150,
            cue_amplitude: 10.0,
            noise_std: 0.0,
            label_noise: 0.3,
            cue_modalities: "random".into(),
            decimals: 3,
        }
    }
}

const PAIRS: [[Modality; 2]; 3] = [
    [Modality::Text, Modality::Audio],
    [Modality::Text, Modality::Vision],
    [Modality::Audio, Modality::Vision],
];

impl SynthSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.d_text, self.d_audio, self.d_vision]
    }

    pub fn len_range(&self, m: Modality) -> (usize, usize) {
        match m {
            Modality::Text => (self.min_len_text, self.max_len_text),
            Modality::Audio => (self.min_len_audio, self.max_len_audio),
            Modality::Vision => (self.min_len_vision, self.max_len_vision),
        }
    }

    fn pairs(&self) -> Result<Vec<[Modality; 2]>> {
        if self.cue_modalities.trim() == "random" {
            return Ok(PAIRS.to_vec());
        }
        let ms = self
            .cue_modalities
            .split(',')
            .map(Modality::parse)
            .collect::<Result<Vec<_>>>()?;
        match ms[..] {
            [a, b] if a != b => Ok(vec![[a, b]]),
            _ => Err(Error::Config(format!(
                "cue_modalities must be \"random\" or two distinct modalities, got {:?}",
                self.cue_modalities
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if n < MIN_SPLIT {
                return Err(Error::Config(format!(
                    "{name} split needs at least {MIN_SPLIT} examples, got {n}"
                )));
            }
        }
        if self.dims().iter().any(|&d| d < 2) {
            return Err(Error::Config("cues need at least 2 feature channels".into()));
        }
        for m in Modality::ALL {
            let (lo, hi) = self.len_range(m);
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("invalid {m} length range {lo}..={hi}")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        if !self.cue_amplitude.is_finite() {
            return Err(Error::Config("cue_amplitude must be finite".into()));
        }
        // |label| ≤ 1.5 + label_noise must stay inside [-3, 3].
        if !(0.0..=1.5).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0, 1.5]".into()));
        }
        if self.decimals > 12 {
            return Err(Error::Config("decimals must be at most 12".into()));
        }
        self.pairs().map(|_| ())
    }
}

/// The three splits, in generation order.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

fn round_to(v: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let r = (v * scale).round() / scale;
    // Avoid writing "-0.0".
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn example<R: Rng>(spec: &SynthSpec, pairs: &[[Modality; 2]], rng: &mut R) -> Result<Example> {
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut seqs: Vec<Vec<Vec<f64>>> = Modality::ALL
        .iter()
        .map(|&m| {
            let (lo, hi) = spec.len_range(m);
            let t = rng.random_range(lo..=hi);
            let d = spec.dims()[m.index()];
            (0..t)
                .map(|_| (0..d).map(|_| noise.sample(rng)).collect())
                .collect()
        })
        .collect();
    let pair = *pairs.choose(rng).expect("at least one pair");
    let mut cues = Vec::with_capacity(2);
    for m in pair {
        let seq = &mut seqs[m.index()];
        let position = rng.random_range(0..seq.len());
        let sign: i8 = if rng.random_bool(0.5) { 1 } else { -1 };
        seq[position][0] = spec.cue_amplitude;
        seq[position][1] = f64::from(sign) * spec.cue_amplitude;
        cues.push(Cue {
            modality: m,
            position,
            sign,
        });
    }
    let u = if spec.label_noise > 0.0 {
        rng.random_range(-spec.label_noise..spec.label_noise)
    } else {
        0.0
    };
    let label = f64::from(cues[0].sign * cues[1].sign) * (1.5 + u);
    for seq in &mut seqs {
        for step in seq.iter_mut() {
            for v in step.iter_mut() {
                *v = round_to(*v, spec.decimals);
            }
        }
    }
    let vision = seqs.pop().unwrap();
    let audio = seqs.pop().unwrap();
    let text = seqs.pop().unwrap();
    Ok(Example {
        text,
        audio,
        vision,
        label: round_to(label, spec.decimals.max(6)),
        cues,
    })
}

pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    spec.validate()?;
    let pairs = spec.pairs()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize| -> Result<Vec<Example>> {
        (0..n).map(|_| example(spec, &pairs, &mut rng)).collect()
    };
    Ok(SynthData {
        train: split(spec.train)?,
        val: split(spec.val)?,
        test: split(spec.test)?,
    })
}

/// Writes `train.jsonl`, `val.jsonl` and `test.jsonl` into `dir`.
pub fn write_splits(data: &SynthData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("train.jsonl"), &data.train)?;
    write_jsonl(&dir.join("val.jsonl"), &data.val)?;
    write_jsonl(&dir.join("test.jsonl"), &data.test)
}
