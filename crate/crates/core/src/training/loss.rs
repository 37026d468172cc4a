use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::bank::EmbeddingBank;
use crate::error::{Error, Result};
use crate::model::layers::log_softmax_last;
use crate::model::{AdaptedModel, ExtractionSide, ForwardOutput, Seq2SeqBatch};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub sf: f64,
    pub total: f64,
    pub n_sf_examples: usize,
}

/// Mean negative log-likelihood of `targets` over positions where `mask` is 1.
pub fn reconstruction_loss(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let denom = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if denom <= 0.0 {
        return Err(Error::Validation("reconstruction loss over zero unmasked positions".into()));
    }
    let logp = log_softmax_last(logits)?;
    let picked = logp.gather(&targets.unsqueeze(D::Minus1)?, D::Minus1)?.squeeze(D::Minus1)?;
    let nll = (picked * mask)?.sum_all()?.neg()?;
    Ok((nll / denom)?)
}

/// `1 - cos(u, v)` for two vectors of equal length.
pub fn similarity_forcing_loss(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let nu = u.sqr()?.sum_all()?.sqrt()?;
    let nv = v.sqr()?.sum_all()?.sqrt()?;
    for n in [&nu, &nv] {
        if n.to_dtype(DType::F64)?.to_scalar::<f64>()? == 0.0 {
            return Err(Error::Validation("cosine of a zero-norm vector".into()));
        }
    }
    let cos = ((u * v)?.sum_all()? / (nu * nv)?)?;
    Ok(cos.affine(-1.0, 1.0)?)
}

/// Loss weights and the rule for which items contribute similarity forcing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_rec: f64,
    pub w_sf: f64,
    pub sf_on_iti: bool,
    pub side: ExtractionSide,
}

/// Definition vectors held as tensors in the model's dtype.
#[derive(Clone, Debug)]
pub struct DefinitionTargets {
    vectors: BTreeMap<String, Tensor>,
}

impl DefinitionTargets {
    pub fn from_bank(bank: &EmbeddingBank, dtype: DType) -> Result<Self> {
        let device = candle_core::Device::Cpu;
        let vectors = bank
            .entries()
            .iter()
            .map(|(id, e)| {
                let t = Tensor::from_slice(&e.vector, e.vector.len(), &device)?.to_dtype(dtype)?;
                Ok((id.clone(), t))
            })
            .collect::<Result<_>>()?;
        Ok(Self { vectors })
    }

    pub fn get(&self, idiom_id: &str) -> Result<&Tensor> {
        self.vectors
            .get(idiom_id)
            .ok_or_else(|| Error::MissingDefinition(idiom_id.to_string()))
    }

    pub fn dim(&self) -> Option<usize> {
        self.vectors.values().next().map(|t| t.elem_count())
    }
}

/// Weighted objective for one batch; returns the differentiable total.
pub fn total_loss(
    model: &AdaptedModel,
    out: &ForwardOutput,
    batch: &Seq2SeqBatch,
    defs: &DefinitionTargets,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let rec = reconstruction_loss(&out.logits, &batch.labels, &batch.dec_mask)?;
    let mut sf_terms = Vec::new();
    if weights.w_sf > 0.0 {
        let embeddings = model.ie_embeddings(out, batch, weights.side)?;
        for (b, emb) in embeddings.into_iter().enumerate() {
            let eligible = batch.ie_in_source[b] || weights.sf_on_iti;
            if let (true, Some(e)) = (eligible, emb) {
                let target = defs.get(&batch.idiom_ids[b])?;
                sf_terms.push(similarity_forcing_loss(&e, target)?);
            }
        }
    }
    let n_sf = sf_terms.len();
    let rec_v = rec.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let mut total = (&rec * weights.w_rec)?;
    let mut sf_v = 0.0;
    if n_sf > 0 {
        let sf = (Tensor::stack(&sf_terms, 0)?.sum_all()? / n_sf as f64)?;
        sf_v = sf.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total = (total + (sf * weights.w_sf)?)?;
    }
    let breakdown = LossBreakdown {
        rec: rec_v,
        sf: sf_v,
        total: weights.w_rec * rec_v + weights.w_sf * sf_v,
        n_sf_examples: n_sf,
    };
    Ok((total, breakdown))
}
