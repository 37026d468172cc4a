use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::Deserialize;

use crate::corpus::Tokenizer;
use crate::error::{Error, Result};
use crate::model::AdaptedModel;

/// A frozen text encoder producing one fixed-size vector per sentence.
pub trait SentenceEncoder {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn encode(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>>;
}

/// Vectors computed offline by an external sentence encoder, looked up by
/// exact text. Source file: JSON lines `{"text": ..., "vector": [...]}`.
#[derive(Clone, Debug)]
pub struct PrecomputedEncoder {
    name: String,
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

#[derive(Deserialize)]
struct Line {
    text: String,
    vector: Vec<f32>,
}

impl PrecomputedEncoder {
    pub fn from_pairs(name: &str, pairs: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (text, v) in pairs {
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(Error::Integrity(format!("vector for {text:?} has dim {}", v.len())));
            }
            vectors.insert(text, v);
        }
        Ok(Self {
            name: name.to_string(),
            dim: dim.unwrap_or(0),
            vectors,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            pairs.push((l.text, l.vector));
        }
        Self::from_pairs(&format!("external:{}", path.display()), pairs)
    }
}

impl SentenceEncoder for PrecomputedEncoder {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        texts
            .iter()
            .map(|t| {
                self.vectors
                    .get(*t)
                    .cloned()
                    .ok_or_else(|| Error::Validation(format!("no precomputed vector for {t:?}")))
            })
            .collect()
    }
}

/// The backbone's own encoder, adapters bypassed, mean-pooled over the
/// sentence tokens.
pub struct BackboneEncoder<'a> {
    model: &'a AdaptedModel,
    tokenizer: &'a dyn Tokenizer,
}

impl<'a> BackboneEncoder<'a> {
    pub fn new(model: &'a AdaptedModel, tokenizer: &'a dyn Tokenizer) -> Self {
        Self { model, tokenizer }
    }
}

impl SentenceEncoder for BackboneEncoder<'_> {
    fn name(&self) -> String {
        format!("backbone:{}", self.tokenizer.name())
    }

    fn dim(&self) -> usize {
        self.model.config().hidden_dim
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let sp = self.tokenizer.special_ids();
        let device = candle_core::Device::Cpu;
        let dtype = self.model.config().precision.dtype();
        let max = self.model.config().max_positions;
        texts
            .iter()
            .map(|t| {
                let mut ids = vec![sp.bos];
                ids.extend(self.tokenizer.encode(t).ids);
                ids.push(sp.eos);
                if ids.len() > max {
                    return Err(Error::SequenceTooLong { len: ids.len(), max });
                }
                let n = ids.len();
                let src = Tensor::from_vec(ids, (1, n), &device)?;
                let mask = Tensor::ones((1, n), dtype, &device)?;
                let hidden = self.model.encode(&src, &mask, false)?;
                // Content tokens only, unless the text encoded to nothing.
                let pooled = if n > 2 { hidden.narrow(1, 1, n - 2)? } else { hidden };
                Ok(pooled.mean(1)?.squeeze(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
            })
            .collect()
    }
}
