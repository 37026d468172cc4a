use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, DefinitionTargets, LossWeights};
use crate::corpus::SpecialIds;
use crate::error::{Error, Result};
use crate::model::{AdaptedModel, Seq2SeqBatch};
use crate::noising::CorruptionExample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

fn loss_value(
    model: &AdaptedModel,
    batch: &Seq2SeqBatch,
    defs: &DefinitionTargets,
    weights: &LossWeights,
) -> Result<(Tensor, f64)> {
    let out = model.forward_batch(batch)?;
    let (total, _) = total_loss(model, &out, batch, defs, weights)?;
    let v = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok((total, v))
}

fn nudge(var: &Var, original: &[f64], index: usize, delta: f64) -> Result<()> {
    let mut values = original.to_vec();
    values[index] += delta;
    let t = Tensor::from_vec(values, var.dims(), var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

/// Compares backprop gradients of the total loss against central finite
/// differences for `n` adapter scalars sampled with `seed`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &AdaptedModel,
    examples: &[&CorruptionExample],
    specials: SpecialIds,
    defs: &DefinitionTargets,
    weights: &LossWeights,
    n: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<GradCheckEntry>> {
    let cfg = model.config();
    if cfg.precision.dtype() != DType::F64 {
        return Err(Error::Config("gradient checks need precision = \"f64\"".into()));
    }
    let batch = Seq2SeqBatch::from_examples(examples, specials, cfg.max_positions, DType::F64)?;
    let (total, _) = loss_value(model, &batch, defs, weights)?;
    let grads = total.backward()?;
    let store = model.adapter_store();
    let names: Vec<&str> = store.names().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = names[rng.random_range(0..names.len())];
        let var = store.var(name).expect("listed name");
        let index = rng.random_range(0..var.elem_count());
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?[index],
            None => 0.0,
        };
        let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        nudge(var, &original, index, step)?;
        let (_, plus) = loss_value(model, &batch, defs, weights)?;
        nudge(var, &original, index, -step)?;
        let (_, minus) = loss_value(model, &batch, defs, weights)?;
        nudge(var, &original, index, 0.0)?;
        let numeric = (plus - minus) / (2.0 * step);
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        out.push(GradCheckEntry {
            param: name.to_string(),
            index,
            analytic,
            numeric,
            relative_error: (analytic - numeric).abs() / scale,
        });
    }
    Ok(out)
}
