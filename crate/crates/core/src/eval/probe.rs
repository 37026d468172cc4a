use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::run_uncorrupted;
use crate::corpus::{Sense, SpecialIds, TokenSpan, TokenizedInstance};
use crate::error::{Error, Result};
use crate::io::{atomic_with, atomic_write, read_to_string};
use crate::model::layers::{log_softmax_last, Linear};
use crate::model::{extract_ie_embedding, AdaptedModel, ExtractionSide, Init, ParamStore};
use crate::noising::{iti_transform, mix_seed};
use crate::training::{optimizer_for, stratified_holdout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Disambiguation,
    Span,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub task: ProbeTask,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Replace the expression with one mask before embedding (control run).
    pub mask_pie: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self::disambiguation()
    }
}

impl ProbeConfig {
    pub fn disambiguation() -> Self {
        Self {
            task: ProbeTask::Disambiguation,
            epochs: 55,
            batch_size: 32,
            dropout: 0.2,
            learning_rate: 1e-5,
            seed: 0,
            validation_fraction: 0.1,
            mask_pie: false,
        }
    }

    pub fn span() -> Self {
        Self {
            task: ProbeTask::Span,
            epochs: 100,
            batch_size: 16,
            ..Self::disambiguation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("probe batch_size and learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("probe validation_fraction must be in [0, 1)".into()));
        }
        if self.mask_pie && self.task == ProbeTask::Span {
            return Err(Error::Config("mask_pie applies to the disambiguation probe only".into()));
        }
        Ok(())
    }
}

/// Frozen features of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeExample {
    pub instance_id: String,
    pub idiom_id: String,
    pub sense: Sense,
    pub pie_span: TokenSpan,
    /// Mean of the expression's token states.
    pub pooled: Vec<f32>,
    /// One state per sentence token.
    pub tokens: Vec<Vec<f32>>,
}

impl ProbeExample {
    pub fn gold_label(&self) -> bool {
        self.sense == Sense::Idiomatic
    }

    /// Expression tokens are idiomatic in idiomatic uses; everything else is literal.
    pub fn gold_tags(&self) -> Vec<bool> {
        gold_tags(self.tokens.len(), self.pie_span, self.sense)
    }
}

pub fn gold_tags(len: usize, pie_span: TokenSpan, sense: Sense) -> Vec<bool> {
    (0..len).map(|i| sense == Sense::Idiomatic && pie_span.contains(i)).collect()
}

/// Read-only view of a trained model used as a feature extractor.
pub struct FrozenEmbedder<'a> {
    model: &'a AdaptedModel,
    side: ExtractionSide,
    checksum: String,
}

fn model_checksum(model: &AdaptedModel) -> Result<String> {
    Ok(format!("{}:{}", model.backbone().checksum()?, model.adapter_store().checksum()?))
}

impl<'a> FrozenEmbedder<'a> {
    pub fn new(model: &'a AdaptedModel, side: ExtractionSide) -> Result<Self> {
        if model.backbone_trainable() {
            return Err(Error::Integrity("probe embedder must be frozen; backbone is trainable".into()));
        }
        Ok(Self { model, side, checksum: model_checksum(model)? })
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn verify(&self) -> Result<()> {
        let now = model_checksum(self.model)?;
        if now != self.checksum {
            return Err(Error::Integrity("embedder weights changed during probing".into()));
        }
        Ok(())
    }

    pub fn embed(
        &self,
        instances: &[TokenizedInstance],
        specials: SpecialIds,
        mask_pie: bool,
        batch_size: usize,
    ) -> Result<Vec<ProbeExample>> {
        let prepared: Vec<TokenizedInstance> = if mask_pie {
            instances
                .iter()
                .map(|i| {
                    let ex = iti_transform(i, specials.mask);
                    let at = i.ie_span.start_token;
                    TokenizedInstance {
                        tokens: ex.source_tokens,
                        ie_span: TokenSpan::new(at, at + 1),
                        ..i.clone()
                    }
                })
                .collect()
        } else {
            instances.to_vec()
        };
        let refs: Vec<&TokenizedInstance> = prepared.iter().collect();
        let mut out = Vec::with_capacity(refs.len());
        let side = self.side;
        run_uncorrupted(self.model, &refs, specials, side, batch_size, |i, hidden, row, len, span| {
            let pooled = extract_ie_embedding(hidden, row, span, len)?
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?;
            let n_tokens = refs[i].tokens.len();
            let tokens = hidden
                .get(row)?
                .narrow(0, 1, n_tokens)?
                .to_dtype(DType::F32)?
                .to_vec2::<f32>()?;
            out.push(ProbeExample {
                instance_id: refs[i].instance_id.clone(),
                idiom_id: refs[i].idiom_id.clone(),
                sense: refs[i].sense,
                pie_span: refs[i].ie_span,
                pooled,
                tokens,
            });
            Ok(())
        })?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub task: ProbeTask,
    pub dim: usize,
    pub config: ProbeConfig,
    pub embedder_checksum: String,
    pub best_epoch: usize,
}

/// A linear disambiguation head, or the d → d/2 → 2 span tagger.
#[derive(Debug)]
pub struct Probe {
    task: ProbeTask,
    dim: usize,
    store: ParamStore,
    hidden: Option<Linear>,
    out: Linear,
    dropout: f64,
}

impl Probe {
    pub fn new(task: ProbeTask, dim: usize, dropout: f64, seed: u64) -> Result<Self> {
        Self::build(ParamStore::new(seed, DType::F32), task, dim, dropout)
    }

    fn build(mut store: ParamStore, task: ProbeTask, dim: usize, dropout: f64) -> Result<Self> {
        let (hidden, out) = match task {
            ProbeTask::Disambiguation => {
                let out = Linear::new(&mut store, "probe.out", dim, 2, Init::Normal(1.0 / (dim as f64).sqrt()), true)?;
                (None, out)
            }
            ProbeTask::Span => {
                let h = (dim / 2).max(1);
                let hidden =
                    Linear::new(&mut store, "probe.hidden", dim, h, Init::Normal(1.0 / (dim as f64).sqrt()), true)?;
                let out = Linear::new(&mut store, "probe.out", h, 2, Init::Normal(1.0 / (h as f64).sqrt()), true)?;
                (Some(hidden), out)
            }
        };
        Ok(Self { task, dim, store, hidden, out, dropout })
    }

    pub fn task(&self) -> ProbeTask {
        self.task
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    fn dropout_mask(&self, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let keep = 1.0 - self.dropout;
        let v: Vec<f32> = (0..rows * cols)
            .map(|_| if rng.random_bool(keep) { (1.0 / keep) as f32 } else { 0.0 })
            .collect();
        Ok(Tensor::from_vec(v, (rows, cols), &Device::Cpu)?)
    }

    /// Logits `(rows, 2)`; dropout is active when `rng` is given.
    pub fn forward(&self, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (rows, _) = x.dims2()?;
        match &self.hidden {
            None => {
                let x = match (rng, self.dropout > 0.0) {
                    (Some(r), true) => (x * self.dropout_mask(rows, self.dim, r)?)?,
                    _ => x.clone(),
                };
                self.out.forward(&x)
            }
            Some(h) => {
                let z = h.forward(x)?.relu()?;
                let cols = z.dim(1)?;
                let z = match (rng, self.dropout > 0.0) {
                    (Some(r), true) => (z * self.dropout_mask(rows, cols, r)?)?,
                    _ => z,
                };
                self.out.forward(&z)
            }
        }
    }

    pub fn save(&self, stem: &Path, meta: &ProbeMeta) -> Result<()> {
        let mut weights = stem.as_os_str().to_owned();
        weights.push(".safetensors");
        let mut json = stem.as_os_str().to_owned();
        json.push(".json");
        atomic_with(Path::new(&weights), |tmp| self.store.save(tmp))?;
        atomic_write(Path::new(&json), serde_json::to_string_pretty(meta)?.as_bytes())
    }

    pub fn load(stem: &Path) -> Result<(Self, ProbeMeta)> {
        let mut weights = stem.as_os_str().to_owned();
        weights.push(".safetensors");
        let mut json = stem.as_os_str().to_owned();
        json.push(".json");
        let json = Path::new(&json);
        if !json.exists() {
            return Err(Error::MissingArtifact { path: json.to_path_buf(), producer: "train-probe".into() });
        }
        let meta: ProbeMeta = serde_json::from_str(&read_to_string(json)?)?;
        let store = ParamStore::from_safetensors(Path::new(&weights), DType::F32)?;
        let probe = Self::build(store, meta.task, meta.dim, meta.config.dropout)?;
        Ok((probe, meta))
    }
}

/// Rows and labels of a set of examples for `task`.
fn design(task: ProbeTask, examples: &[&ProbeExample]) -> Result<(Tensor, Tensor)> {
    let mut rows: Vec<f32> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for ex in examples {
        match task {
            ProbeTask::Disambiguation => {
                rows.extend(&ex.pooled);
                labels.push(ex.gold_label() as u32);
            }
            ProbeTask::Span => {
                for (t, tag) in ex.tokens.iter().zip(ex.gold_tags()) {
                    rows.extend(t);
                    labels.push(tag as u32);
                }
            }
        }
    }
    let n = labels.len();
    let dim = if n == 0 { 0 } else { rows.len() / n };
    Ok((
        Tensor::from_vec(rows, (n, dim), &Device::Cpu)?,
        Tensor::from_vec(labels, n, &Device::Cpu)?,
    ))
}

fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let logp = log_softmax_last(logits)?;
    let picked = logp.gather(&labels.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub n_train: usize,
    pub n_validation: usize,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Trains a probe on frozen features; keeps the best-validation weights.
pub fn train_probe(examples: &[ProbeExample], config: &ProbeConfig) -> Result<(Probe, ProbeOutcome)> {
    config.validate()?;
    let dim = examples
        .first()
        .map(|e| e.pooled.len())
        .ok_or_else(|| Error::Validation("no probe training examples".into()))?;
    if config.task == ProbeTask::Disambiguation {
        let pos = examples.iter().filter(|e| e.gold_label()).count();
        if pos == 0 || pos == examples.len() {
            return Err(Error::Validation("disambiguation training needs both senses".into()));
        }
    }
    let strata: Vec<&str> = examples.iter().map(|e| e.idiom_id.as_str()).collect();
    let held = stratified_holdout(&strata, config.validation_fraction, mix_seed(config.seed, 0x7072));
    let train: Vec<&ProbeExample> = examples.iter().enumerate().filter(|(i, _)| !held.contains(i)).map(|(_, e)| e).collect();
    let val: Vec<&ProbeExample> = held.iter().map(|&i| &examples[i]).collect();
    let probe = Probe::new(config.task, dim, config.dropout, config.seed)?;
    let mut opt = optimizer_for(probe.store.vars(), config.learning_rate)?;
    let val_design = if val.is_empty() { None } else { Some(design(config.task, &val)?) };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut outcome = ProbeOutcome {
        best_epoch: 0,
        train_loss: Vec::new(),
        validation_loss: Vec::new(),
        n_train: train.len(),
        n_validation: val.len(),
    };
    let mut best = (f64::INFINITY, probe.store.snapshot()?);
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ProbeExample> = chunk.iter().map(|&i| train[i]).collect();
            let (x, y) = design(config.task, &batch)?;
            let loss = cross_entropy(&probe.forward(&x, Some(&mut rng))?, &y)?;
            opt.backward_step(&loss)?;
            sum += scalar(&loss)?;
            n += 1;
        }
        outcome.train_loss.push(if n > 0 { sum / n as f64 } else { 0.0 });
        let score = match &val_design {
            Some((x, y)) => {
                let l = scalar(&cross_entropy(&probe.forward(x, None)?, y)?)?;
                outcome.validation_loss.push(l);
                l
            }
            None => *outcome.train_loss.last().unwrap(),
        };
        if score < best.0 {
            best = (score, probe.store.snapshot()?);
            outcome.best_epoch = epoch;
        }
    }
    probe.store.restore(&best.1)?;
    Ok((probe, outcome))
}

fn argmax_rows(logits: &Tensor) -> Result<Vec<bool>> {
    let v = logits.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    Ok(v.iter().map(|r| r[1] > r[0]).collect())
}

pub fn predict_disambiguation(probe: &Probe, examples: &[ProbeExample]) -> Result<Vec<bool>> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&ProbeExample> = examples.iter().collect();
    let (x, _) = design(ProbeTask::Disambiguation, &refs)?;
    argmax_rows(&probe.forward(&x, None)?)
}

pub fn predict_span(probe: &Probe, examples: &[ProbeExample]) -> Result<Vec<Vec<bool>>> {
    examples
        .iter()
        .map(|e| {
            let (x, _) = design(ProbeTask::Span, &[e])?;
            argmax_rows(&probe.forward(&x, None)?)
        })
        .collect()
}
