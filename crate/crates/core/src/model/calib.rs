//! Calibration and evaluation token streams.
//!
//! Text is tokenized at the byte level: each UTF-8 byte is its own id, so the
//! vocabulary is exactly 256 and no tokenizer table has to be shipped.
//! Synthetic streams come from a seeded first-order Markov source in which
//! every token has three preferred successors.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CalibSource {
    /// `language` fixes the transition table, `seed` the sampled sequences.
    Synthetic {
        language: u64,
        seed: u64,
        vocab_size: usize,
    },
    Text { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
    pub vocab_size: usize,
    pub source: String,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.seq_len();
        for s in &self.sequences {
            if s.len() != len {
                return Err(Error::Ingestion("sequences differ in length".into()));
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::Ingestion(format!(
                    "token {t} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// First `n` sequences.
    pub fn take(&self, n: usize) -> CalibrationSet {
        CalibrationSet {
            sequences: self.sequences.iter().take(n).cloned().collect(),
            vocab_size: self.vocab_size,
            source: self.source.clone(),
        }
    }
}

/// Seeded Markov source with a sparse, skewed transition table.
#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    vocab_size: usize,
    successors: Vec<[u32; 3]>,
}

const SUCCESSOR_WEIGHTS: [f64; 3] = [0.6, 0.25, 0.1];

impl SyntheticLanguage {
    pub fn new(language: u64, vocab_size: usize) -> Self {
        let mut rng = Rng::new(language);
        let successors = (0..vocab_size)
            .map(|_| {
                [
                    rng.below(vocab_size) as u32,
                    rng.below(vocab_size) as u32,
                    rng.below(vocab_size) as u32,
                ]
            })
            .collect();
        Self {
            vocab_size,
            successors,
        }
    }

    pub fn sample(&self, rng: &mut Rng, len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.below(self.vocab_size) as u32;
        for _ in 0..len {
            out.push(cur);
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut next = None;
            for (w, &s) in SUCCESSOR_WEIGHTS.iter().zip(&self.successors[cur as usize]) {
                acc += w;
                if u < acc {
                    next = Some(s);
                    break;
                }
            }
            cur = next.unwrap_or_else(|| rng.below(self.vocab_size) as u32);
        }
        out
    }
}

pub fn tokenize_bytes(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

pub fn make_calibration(source: &CalibSource, n_samples: usize, seq_len: usize) -> Result<CalibrationSet> {
    if n_samples == 0 || seq_len == 0 {
        return Err(Error::Ingestion("n_samples and seq_len must be at least 1".into()));
    }
    let set = match source {
        CalibSource::Synthetic {
            language,
            seed,
            vocab_size,
        } => {
            if *vocab_size < 2 {
                return Err(Error::Ingestion("synthetic vocabulary needs at least 2 ids".into()));
            }
            let lang = SyntheticLanguage::new(*language, *vocab_size);
            let mut rng = Rng::new(*seed);
            CalibrationSet {
                sequences: (0..n_samples).map(|_| lang.sample(&mut rng, seq_len)).collect(),
                vocab_size: *vocab_size,
                source: format!("synthetic(language={language},seed={seed})"),
            }
        }
        CalibSource::Text { path } => {
            let bytes = std::fs::read(path)?;
            let ids = tokenize_bytes(&bytes);
            let need = n_samples * seq_len;
            if ids.len() < need {
                return Err(Error::Ingestion(format!(
                    "{} holds {} tokens, {need} needed",
                    path.display(),
                    ids.len()
                )));
            }
            CalibrationSet {
                sequences: ids.chunks_exact(seq_len).take(n_samples).map(<[u32]>::to_vec).collect(),
                vocab_size: BYTE_VOCAB,
                source: format!("text({})", path.display()),
            }
        }
    };
    set.validate()?;
    Ok(set)
}
