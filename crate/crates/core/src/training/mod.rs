//! Adapter training: reconstruction plus similarity forcing, Adam, periodic
//! checkpoints and best-validation selection.

mod gradcheck;
mod loss;
mod split;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradcheck::{gradient_check, GradCheckEntry};
pub use loss::{
    reconstruction_loss, similarity_forcing_loss, total_loss, DefinitionTargets, LossBreakdown, LossWeights,
};
pub use split::stratified_holdout;

use crate::corpus::{SpecialIds, TokenizedInstance};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, AdaptedModel, CheckpointFiles, ExtractionSide, Seq2SeqBatch};
use crate::noising::{mix_seed, schedule_epoch, CorruptionExample, NoisingPolicy, TokenizedTemplate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub w_rec: f64,
    pub w_sf: f64,
    /// Apply similarity forcing to idiom-aware infilling items too.
    pub sf_on_iti: bool,
    pub freeze_backbone: bool,
    /// Save a checkpoint every this many epochs; 0 saves only the last one.
    pub checkpoint_cadence: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub extraction: ExtractionSide,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 220,
            batch_size: 16,
            learning_rate: 1e-5,
            w_rec: 1.0,
            w_sf: 1.0,
            sf_on_iti: false,
            freeze_backbone: true,
            checkpoint_cadence: 0,
            validation_fraction: 0.05,
            seed: 0,
            extraction: ExtractionSide::Decoder,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_rec < 0.0 || self.w_sf < 0.0 || !(self.w_rec + self.w_sf > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0 with a positive sum (w_rec {}, w_sf {})",
                self.w_rec, self.w_sf
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w_rec: self.w_rec,
            w_sf: self.w_sf,
            sf_on_iti: self.sf_on_iti,
            side: self.extraction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,rec,sf,total,n_sf_examples";

pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.epoch, r.loss.rec, r.loss.sf, r.loss.total, r.loss.n_sf_examples
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub step: usize,
    pub validation: Option<LossBreakdown>,
    pub files: Option<CheckpointFiles>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: Vec<LossRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Index into `checkpoints` of the best-validation checkpoint.
    pub best: usize,
    pub best_files: Option<CheckpointFiles>,
    pub train_sentences: usize,
    pub validation_sentences: usize,
    pub frozen_checksum: String,
}

/// Inputs for one training run.
pub struct TrainData<'a> {
    pub instances: &'a [TokenizedInstance],
    pub templates: &'a [TokenizedTemplate],
    pub specials: SpecialIds,
}

fn batches<'e>(examples: &'e [CorruptionExample], size: usize) -> impl Iterator<Item = Vec<&'e CorruptionExample>> {
    examples.chunks(size).map(|c| c.iter().collect())
}

/// Mean loss over `examples` without updating anything.
pub fn evaluate_loss(
    model: &AdaptedModel,
    examples: &[CorruptionExample],
    specials: SpecialIds,
    defs: &DefinitionTargets,
    weights: &LossWeights,
    batch_size: usize,
) -> Result<LossBreakdown> {
    let max = model.config().max_positions;
    let dtype = model.config().precision.dtype();
    let (mut rec, mut sf, mut n_rows, mut n_sf) = (0.0, 0.0, 0usize, 0usize);
    for batch in batches(examples, batch_size.max(1)) {
        let b = Seq2SeqBatch::from_examples(&batch, specials, max, dtype)?;
        let out = model.forward_batch(&b)?;
        let (_, l) = total_loss(model, &out, &b, defs, weights)?;
        rec += l.rec * b.len() as f64;
        sf += l.sf * l.n_sf_examples as f64;
        n_rows += b.len();
        n_sf += l.n_sf_examples;
    }
    if n_rows == 0 {
        return Err(Error::Validation("no examples to evaluate".into()));
    }
    let rec = rec / n_rows as f64;
    let sf = if n_sf > 0 { sf / n_sf as f64 } else { 0.0 };
    Ok(LossBreakdown {
        rec,
        sf,
        total: weights.w_rec * rec + weights.w_sf * sf,
        n_sf_examples: n_sf,
    })
}

/// One optimizer update on a batch; returns the pre-update loss.
pub fn train_step(
    model: &AdaptedModel,
    opt: &mut AdamW,
    batch: &[&CorruptionExample],
    specials: SpecialIds,
    defs: &DefinitionTargets,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let cfg = model.config();
    let b = Seq2SeqBatch::from_examples(batch, specials, cfg.max_positions, cfg.precision.dtype())?;
    let out = model.forward_batch(&b)?;
    let (total, breakdown) = total_loss(model, &out, &b, defs, weights)?;
    opt.backward_step(&total)?;
    Ok(breakdown)
}

pub fn optimizer(model: &AdaptedModel, learning_rate: f64) -> Result<AdamW> {
    optimizer_for(model.trainable_vars(), learning_rate)
}

/// Adam (decoupled weight decay switched off) over `vars`.
pub fn optimizer_for(vars: Vec<candle_core::Var>, learning_rate: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr: learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

const VALIDATION_EPOCH: u64 = u64::MAX;

/// Trains the adapter in place and leaves the model at its best-validation
/// weights. Checkpoints go to `checkpoint_dir` when given.
pub fn train_adapter(
    model: &mut AdaptedModel,
    data: &TrainData,
    policy: &NoisingPolicy,
    defs: &DefinitionTargets,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    policy.validate()?;
    model.set_backbone_trainable(!config.freeze_backbone)?;
    let origin_checksum = model.backbone().checksum()?;
    let idioms: Vec<&str> = data.instances.iter().map(|i| i.idiom_id.as_str()).collect();
    for id in idioms.iter().copied().collect::<std::collections::BTreeSet<_>>() {
        if config.w_sf > 0.0 {
            defs.get(id)?;
        }
    }
    if let (Some(d), true) = (defs.dim(), config.w_sf > 0.0) {
        if d != model.config().hidden_dim {
            return Err(Error::Config(format!(
                "definition embeddings have dim {d}, the model has {}",
                model.config().hidden_dim
            )));
        }
    }
    let held = stratified_holdout(&idioms, config.validation_fraction, mix_seed(config.seed, 0x7661_6c));
    let (train, val): (Vec<TokenizedInstance>, Vec<TokenizedInstance>) = {
        let mut t = Vec::new();
        let mut v = Vec::new();
        for (i, inst) in data.instances.iter().enumerate() {
            if held.contains(&i) { v.push(inst.clone()) } else { t.push(inst.clone()) }
        }
        (t, v)
    };
    let weights = config.weights();
    let val_examples = if val.is_empty() {
        Vec::new()
    } else {
        schedule_epoch(&val, &[], policy, data.specials.mask, VALIDATION_EPOCH)
    };
    let mut opt = optimizer(model, config.learning_rate)?;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut best: Option<(f64, usize, BTreeMap<String, Tensor>, Option<BTreeMap<String, Tensor>>)> = None;
    let mut step = 0usize;
    let mut epoch_done = 0usize;

    let consider = |model: &AdaptedModel,
                        epoch: usize,
                        step: usize,
                        epoch_mean: Option<LossBreakdown>,
                        checkpoints: &mut Vec<CheckpointRecord>,
                        best: &mut Option<(f64, usize, BTreeMap<String, Tensor>, Option<BTreeMap<String, Tensor>>)>,
                        save: bool|
     -> Result<()> {
        model.verify_frozen(&origin_checksum)?;
        let validation = if val_examples.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, &val_examples, data.specials, defs, &weights, config.batch_size)?)
        };
        let score = validation.or(epoch_mean).map(|l| l.total).unwrap_or(f64::INFINITY);
        let files = match (save, checkpoint_dir) {
            (true, Some(dir)) => Some(save_checkpoint(
                model,
                &origin_checksum,
                step,
                epoch,
                &dir.join(format!("epoch{epoch:04}")),
            )?),
            _ => None,
        };
        checkpoints.push(CheckpointRecord { epoch, step, validation, files });
        let improves = best.as_ref().is_none_or(|b| score < b.0);
        if improves {
            let backbone = if model.backbone_trainable() {
                Some(model.backbone().store().snapshot()?)
            } else {
                None
            };
            *best = Some((score, checkpoints.len() - 1, model.adapter_store().snapshot()?, backbone));
        }
        Ok(())
    };

    consider(model, 0, 0, None, &mut checkpoints, &mut best, config.epochs == 0)?;
    'epochs: for epoch in 1..=config.epochs {
        let mut examples = schedule_epoch(&train, data.templates, policy, data.specials.mask, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        examples.shuffle(&mut rng);
        let (mut sum, mut n) = (LossBreakdown::default(), 0usize);
        for batch in batches(&examples, config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let l = train_step(model, &mut opt, &batch, data.specials, defs, &weights)?;
            log.push(LossRecord { step, epoch, loss: l });
            sum.rec += l.rec;
            sum.sf += l.sf;
            sum.total += l.total;
            n += 1;
            step += 1;
        }
        epoch_done = epoch;
        let mean = (n > 0).then(|| LossBreakdown {
            rec: sum.rec / n as f64,
            sf: sum.sf / n as f64,
            total: sum.total / n as f64,
            n_sf_examples: 0,
        });
        let cadence_hit = config.checkpoint_cadence > 0 && epoch % config.checkpoint_cadence == 0;
        if cadence_hit || epoch == config.epochs {
            consider(model, epoch, step, mean, &mut checkpoints, &mut best, true)?;
        }
    }
    if checkpoints.last().is_none_or(|c| c.epoch != epoch_done) {
        consider(model, epoch_done, step, None, &mut checkpoints, &mut best, true)?;
    }
    let (_, best_idx, adapter_snap, backbone_snap) = best.expect("at least one checkpoint considered");
    model.adapter_store().restore(&adapter_snap)?;
    if let Some(snap) = &backbone_snap {
        model.backbone().store().restore(snap)?;
    }
    model.verify_frozen(&origin_checksum)?;
    let best_files = match checkpoint_dir {
        Some(dir) => {
            let c = &checkpoints[best_idx];
            Some(save_checkpoint(model, &origin_checksum, c.step, c.epoch, &dir.join("best"))?)
        }
        None => None,
    };
    Ok(TrainOutcome {
        log,
        checkpoints,
        best: best_idx,
        best_files,
        train_sentences: train.len(),
        validation_sentences: val.len(),
        frozen_checksum: model.backbone().checksum()?,
    })
}

/// Path stem of the best checkpoint in a checkpoint directory.
pub fn best_checkpoint_stem(dir: &Path) -> PathBuf {
    dir.join("best")
}
