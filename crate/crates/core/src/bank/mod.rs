//! Per-idiom embedding banks: pooled expression embeddings from the adapted
//! model and definition embeddings from a frozen sentence encoder.

mod encoder;
mod format;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use encoder::{BackboneEncoder, PrecomputedEncoder, SentenceEncoder};

use candle_core::{DType, Tensor};

use crate::corpus::{Dictionary, SpecialIds, TokenSpan, TokenizedInstance, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{extract_ie_embedding, AdaptedModel, ExtractionSide, Seq2SeqBatch};
use crate::noising::copy_transform;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankKind {
    Ie,
    Definition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub vector: Vec<f32>,
    pub n_sentences: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    kind: BankKind,
    dim: usize,
    entries: BTreeMap<String, BankEntry>,
    provenance: BTreeMap<String, String>,
}

impl EmbeddingBank {
    pub fn new(kind: BankKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            entries: BTreeMap::new(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, idiom_id: &str, vector: Vec<f32>, n_sentences: usize) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Integrity(format!(
                "{idiom_id}: vector of {} values in a bank of dim {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity(format!("{idiom_id}: non-finite embedding")));
        }
        if self.kind == BankKind::Ie && n_sentences == 0 {
            return Err(Error::Validation(format!("{idiom_id}: expression embedding from zero sentences")));
        }
        if self.entries.contains_key(idiom_id) {
            return Err(Error::Validation(format!("duplicate bank entry {idiom_id}")));
        }
        self.entries.insert(idiom_id.to_string(), BankEntry { vector, n_sentences });
        Ok(())
    }

    pub fn get(&self, idiom_id: &str) -> Option<&BankEntry> {
        self.entries.get(idiom_id)
    }

    pub fn vector(&self, idiom_id: &str) -> Option<&[f32]> {
        self.entries.get(idiom_id).map(|e| e.vector.as_slice())
    }

    pub fn contains(&self, idiom_id: &str) -> bool {
        self.entries.contains_key(idiom_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, BankEntry> {
        &self.entries
    }

    pub fn provenance(&self) -> &BTreeMap<String, String> {
        &self.provenance
    }

    pub fn set_provenance(&mut self, key: &str, value: impl Into<String>) {
        self.provenance.insert(key.to_string(), value.into());
    }

    pub fn mean_sentences(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.values().map(|e| e.n_sentences as f64).sum::<f64>() / self.entries.len() as f64
    }

    /// The bank restricted to `ids` (missing ids are skipped).
    pub fn restrict<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut out = Self {
            kind: self.kind,
            dim: self.dim,
            entries: BTreeMap::new(),
            provenance: self.provenance.clone(),
        };
        for id in ids {
            if let Some(e) = self.entries.get(id) {
                out.entries.insert(id.to_string(), e.clone());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        format::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::decode(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                producer: "build-bank".into(),
            });
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| (x as f64 / norm) as f32).collect()
}

/// One unit-normalized definition vector per listed idiom.
pub fn build_definition_embeddings(
    dictionary: &Dictionary,
    idiom_ids: &[&str],
    encoder: &dyn SentenceEncoder,
) -> Result<EmbeddingBank> {
    let mut texts = Vec::with_capacity(idiom_ids.len());
    for id in idiom_ids {
        let entry = dictionary
            .get(id)
            .ok_or_else(|| Error::UnknownIdiom((*id).to_string()))?;
        if !entry.has_definition() {
            return Err(Error::MissingDefinition((*id).to_string()));
        }
        texts.push(entry.definition.as_str());
    }
    let vectors = encoder.encode(&texts)?;
    let mut bank = EmbeddingBank::new(BankKind::Definition, encoder.dim());
    for (id, v) in idiom_ids.iter().zip(vectors) {
        bank.insert(id, unit(v), 1)?;
    }
    bank.set_provenance("encoder", encoder.name());
    Ok(bank)
}

/// Feeds each instance uncorrupted (as both source and target) and hands
/// every row's final hidden states to `visit` along with its index in
/// `instances`, row within the batch, unpadded length and expression span.
pub(crate) fn run_uncorrupted(
    model: &AdaptedModel,
    instances: &[&TokenizedInstance],
    specials: SpecialIds,
    side: ExtractionSide,
    batch_size: usize,
    mut visit: impl FnMut(usize, &Tensor, usize, usize, TokenSpan) -> Result<()>,
) -> Result<()> {
    let batch_size = batch_size.max(1);
    let examples: Vec<_> = instances.iter().map(|i| copy_transform(i)).collect();
    let max = model.config().max_positions;
    let dtype = model.config().precision.dtype();
    for (chunk_idx, chunk) in examples.chunks(batch_size).enumerate() {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = Seq2SeqBatch::from_examples(&refs, specials, max, dtype)?;
        let out = model.forward_batch(&batch)?;
        for b in 0..batch.len() {
            let (hidden, len, span) = match side {
                ExtractionSide::Decoder => (&out.decoder_hidden, batch.dec_lens[b], batch.ie_dec_spans[b]),
                ExtractionSide::Encoder => (
                    &out.encoder_hidden,
                    batch.src_lens[b],
                    batch.ie_src_spans[b].expect("copy input keeps the expression"),
                ),
            };
            visit(chunk_idx * batch_size + b, hidden, b, len, span)?;
        }
    }
    Ok(())
}

/// Mean of pooled expression embeddings over each idiom's sentences.
///
/// Sentences are processed in instance-id order, so the result does not
/// depend on the order of `instances`.
pub fn build_ie_embeddings(
    model: &AdaptedModel,
    instances: &[TokenizedInstance],
    idiom_ids: Option<&[&str]>,
    tokenizer: &dyn Tokenizer,
    side: ExtractionSide,
    batch_size: usize,
) -> Result<EmbeddingBank> {
    let mut ordered: Vec<&TokenizedInstance> = instances
        .iter()
        .filter(|i| idiom_ids.is_none_or(|ids| ids.contains(&i.idiom_id.as_str())))
        .collect();
    ordered.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    let d = model.config().hidden_dim;
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    run_uncorrupted(model, &ordered, tokenizer.special_ids(), side, batch_size, |i, hidden, row, len, span| {
        let v = extract_ie_embedding(hidden, row, span, len)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        let slot = sums.entry(ordered[i].idiom_id.as_str()).or_insert_with(|| (vec![0.0; d], 0));
        slot.0.iter_mut().zip(&v).for_each(|(s, x)| *s += x);
        slot.1 += 1;
        Ok(())
    })?;
    let mut bank = EmbeddingBank::new(BankKind::Ie, d);
    if let Some(ids) = idiom_ids {
        for id in ids {
            if !sums.contains_key(id) {
                log::warn!("idiom {id} has no sentences in this view; omitted from the bank");
            }
        }
    }
    for (id, (sum, n)) in sums {
        let v = sum.iter().map(|s| (s / n as f64) as f32).collect();
        bank.insert(id, v, n)?;
    }
    bank.set_provenance("extraction", format!("{side:?}").to_lowercase());
    Ok(bank)
}

/// Top-`k` neighbours of `idiom_id` by cosine, ties broken by idiom id.
pub fn nearest_idioms(bank: &EmbeddingBank, idiom_id: &str, k: usize) -> Result<Vec<(String, f64)>> {
    let query = bank
        .vector(idiom_id)
        .ok_or_else(|| Error::UnknownIdiom(idiom_id.to_string()))?;
    if k >= bank.len() {
        return Err(Error::Validation(format!("k = {k} must be below the bank size {}", bank.len())));
    }
    let mut scored: Vec<(String, f64)> = bank
        .entries
        .iter()
        .filter(|(id, _)| id.as_str() != idiom_id)
        .map(|(id, e)| (id.clone(), cosine(query, &e.vector)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}
