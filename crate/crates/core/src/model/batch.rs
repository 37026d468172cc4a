use candle_core::{DType, Device, Tensor};

use crate::corpus::{SpecialIds, TokenSpan};
use crate::error::{Error, Result};
use crate::noising::CorruptionExample;

/// A padded seq2seq batch.
///
/// Encoder input is `[BOS] source [EOS]`, decoder input `[BOS] target` and
/// labels `target [EOS]`, so target token `k` is fed at decoder position `k + 1`.
#[derive(Clone, Debug)]
pub struct Seq2SeqBatch {
    pub src_ids: Tensor,
    pub src_mask: Tensor,
    pub dec_ids: Tensor,
    pub dec_mask: Tensor,
    pub labels: Tensor,
    /// Unpadded decoder length of each row.
    pub dec_lens: Vec<usize>,
    /// Unpadded encoder length of each row.
    pub src_lens: Vec<usize>,
    /// Expression position in the decoder input of each row.
    pub ie_dec_spans: Vec<TokenSpan>,
    /// Expression position in the encoder input, when visible there.
    pub ie_src_spans: Vec<Option<TokenSpan>>,
    pub idiom_ids: Vec<String>,
    pub ie_in_source: Vec<bool>,
}

fn shift(span: TokenSpan) -> TokenSpan {
    TokenSpan::new(span.start_token + 1, span.end_token + 1)
}

fn pad_rows(rows: &[Vec<u32>], pad: u32, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let b = rows.len();
    let len = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(b * len);
    let mut mask = Vec::with_capacity(b * len);
    for row in rows {
        for j in 0..len {
            ids.push(row.get(j).copied().unwrap_or(pad));
            mask.push(if j < row.len() { 1f32 } else { 0f32 });
        }
    }
    Ok((
        Tensor::from_vec(ids, (b, len), device)?,
        Tensor::from_vec(mask, (b, len), device)?.to_dtype(dtype)?,
    ))
}

impl Seq2SeqBatch {
    pub fn from_examples(
        examples: &[&CorruptionExample],
        specials: SpecialIds,
        max_positions: usize,
        dtype: DType,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let device = Device::Cpu;
        let mut src = Vec::new();
        let mut dec = Vec::new();
        let mut lab = Vec::new();
        for ex in examples {
            let s_len = ex.source_tokens.len() + 2;
            let t_len = ex.target_tokens.len() + 1;
            for len in [s_len, t_len] {
                if len > max_positions {
                    return Err(Error::SequenceTooLong { len, max: max_positions });
                }
            }
            let mut s = vec![specials.bos];
            s.extend(&ex.source_tokens);
            s.push(specials.eos);
            let mut d = vec![specials.bos];
            d.extend(&ex.target_tokens);
            let mut l = ex.target_tokens.clone();
            l.push(specials.eos);
            src.push(s);
            dec.push(d);
            lab.push(l);
        }
        let (src_ids, src_mask) = pad_rows(&src, specials.pad, dtype, &device)?;
        let (dec_ids, dec_mask) = pad_rows(&dec, specials.pad, dtype, &device)?;
        let (labels, _) = pad_rows(&lab, specials.pad, dtype, &device)?;
        Ok(Self {
            src_ids,
            src_mask,
            dec_ids,
            dec_mask,
            labels,
            dec_lens: dec.iter().map(Vec::len).collect(),
            src_lens: src.iter().map(Vec::len).collect(),
            ie_dec_spans: examples.iter().map(|e| shift(e.ie_span_target)).collect(),
            ie_src_spans: examples.iter().map(|e| e.ie_span_source.map(shift)).collect(),
            idiom_ids: examples.iter().map(|e| e.idiom_id.clone()).collect(),
            ie_in_source: examples.iter().map(|e| e.ie_in_source()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.idiom_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idiom_ids.is_empty()
    }
}
