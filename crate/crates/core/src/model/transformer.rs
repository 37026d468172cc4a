use candle_core::{IndexOp, Tensor, Var};

use super::adapter::Adapter;
use super::batch::Seq2SeqBatch;
use super::config::{Activation, AdapterSpec, BackboneConfig, ExtractionSide};
use super::layers::{activate, causal_bias, padding_bias, Attention, Embedding, LayerNorm, Linear};
use super::params::{Init, ParamStore};
use crate::corpus::TokenSpan;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;
const POSITION_OFFSET: usize = 2;

#[derive(Clone, Debug)]
struct EncoderLayer {
    self_attn: Attention,
    self_attn_norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    final_norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    self_attn_norm: LayerNorm,
    cross_attn: Attention,
    cross_attn_norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    final_norm: LayerNorm,
}

fn ffn(fc1: &Linear, fc2: &Linear, x: &Tensor) -> Result<Tensor> {
    fc2.forward(&activate(&fc1.forward(x)?, Activation::Gelu)?)
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, p: &str, cfg: &BackboneConfig, tr: bool) -> Result<Self> {
        let (d, f) = (cfg.hidden_dim, cfg.ffn_dim);
        let w = Init::Normal(INIT_STD);
        Ok(Self {
            self_attn: Attention::new(store, &format!("{p}.self_attn"), d, cfg.num_heads, INIT_STD, tr)?,
            self_attn_norm: LayerNorm::new(store, &format!("{p}.self_attn_layer_norm"), d, tr)?,
            fc1: Linear::new(store, &format!("{p}.fc1"), d, f, w, tr)?,
            fc2: Linear::new(store, &format!("{p}.fc2"), f, d, w, tr)?,
            final_norm: LayerNorm::new(store, &format!("{p}.final_layer_norm"), d, tr)?,
        })
    }

    fn forward(&self, x: &Tensor, bias: &Tensor, adapter: Option<&Adapter>) -> Result<Tensor> {
        let x = self.self_attn_norm.forward(&(x + self.self_attn.forward(x, x, bias)?)?)?;
        let x = self.final_norm.forward(&(&x + ffn(&self.fc1, &self.fc2, &x)?)?)?;
        match adapter {
            Some(a) => a.forward(&x),
            None => Ok(x),
        }
    }
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, p: &str, cfg: &BackboneConfig, tr: bool) -> Result<Self> {
        let (d, f) = (cfg.hidden_dim, cfg.ffn_dim);
        let w = Init::Normal(INIT_STD);
        Ok(Self {
            self_attn: Attention::new(store, &format!("{p}.self_attn"), d, cfg.num_heads, INIT_STD, tr)?,
            self_attn_norm: LayerNorm::new(store, &format!("{p}.self_attn_layer_norm"), d, tr)?,
            cross_attn: Attention::new(store, &format!("{p}.encoder_attn"), d, cfg.num_heads, INIT_STD, tr)?,
            cross_attn_norm: LayerNorm::new(store, &format!("{p}.encoder_attn_layer_norm"), d, tr)?,
            fc1: Linear::new(store, &format!("{p}.fc1"), d, f, w, tr)?,
            fc2: Linear::new(store, &format!("{p}.fc2"), f, d, w, tr)?,
            final_norm: LayerNorm::new(store, &format!("{p}.final_layer_norm"), d, tr)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        self_bias: &Tensor,
        memory: &Tensor,
        cross_bias: &Tensor,
        adapter: Option<&Adapter>,
    ) -> Result<Tensor> {
        let x = self.self_attn_norm.forward(&(x + self.self_attn.forward(x, x, self_bias)?)?)?;
        let x = self
            .cross_attn_norm
            .forward(&(&x + self.cross_attn.forward(&x, memory, cross_bias)?)?)?;
        let x = self.final_norm.forward(&(&x + ffn(&self.fc1, &self.fc2, &x)?)?)?;
        match adapter {
            Some(a) => a.forward(&x),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
struct Layers {
    shared: Embedding,
    enc_pos: Embedding,
    dec_pos: Embedding,
    enc_emb_norm: LayerNorm,
    dec_emb_norm: LayerNorm,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    logits_bias: Tensor,
}

impl Layers {
    fn build(store: &mut ParamStore, cfg: &BackboneConfig, tr: bool) -> Result<Self> {
        let (v, d) = (cfg.vocab_size, cfg.hidden_dim);
        let pos_rows = cfg.max_positions + POSITION_OFFSET;
        let bias = store.get("final_logits_bias", &[1, v], Init::Const(0.0))?;
        Ok(Self {
            shared: Embedding::new(store, "model.shared.weight", v, d, INIT_STD, tr)?,
            enc_pos: Embedding::new(store, "model.encoder.embed_positions.weight", pos_rows, d, INIT_STD, tr)?,
            dec_pos: Embedding::new(store, "model.decoder.embed_positions.weight", pos_rows, d, INIT_STD, tr)?,
            enc_emb_norm: LayerNorm::new(store, "model.encoder.layernorm_embedding", d, tr)?,
            dec_emb_norm: LayerNorm::new(store, "model.decoder.layernorm_embedding", d, tr)?,
            encoder: (0..cfg.num_layers)
                .map(|i| EncoderLayer::new(store, &format!("model.encoder.layers.{i}"), cfg, tr))
                .collect::<Result<_>>()?,
            decoder: (0..cfg.num_layers)
                .map(|i| DecoderLayer::new(store, &format!("model.decoder.layers.{i}"), cfg, tr))
                .collect::<Result<_>>()?,
            logits_bias: if tr { bias.as_tensor().clone() } else { bias.as_detached_tensor() },
        })
    }
}

/// The pretrained (or tiny, randomly initialized) encoder-decoder.
#[derive(Debug)]
pub struct Backbone {
    config: BackboneConfig,
    store: ParamStore,
}

impl Backbone {
    pub fn new(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let dtype = config.precision.dtype();
        let mut store = match &config.checkpoint {
            Some(path) if !config.tiny_mode => {
                if !path.exists() {
                    return Err(Error::MissingArtifact {
                        path: path.clone(),
                        producer: "a pretrained checkpoint download".into(),
                    });
                }
                ParamStore::from_safetensors(path, dtype)?
            }
            _ => ParamStore::new(config.init_seed, dtype),
        };
        Layers::build(&mut store, config, false)?;
        store.retain_accessed();
        Ok(Self { config: config.clone(), store })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }
}

/// Split of the model's weights into the frozen backbone and the adapter.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParameterPartition {
    pub frozen_count: usize,
    pub trainable_count: usize,
    pub frozen_checksum: String,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(batch, dec_len, vocab)`
    pub logits: Tensor,
    /// `(batch, dec_len, d)`
    pub decoder_hidden: Tensor,
    /// `(batch, src_len, d)`
    pub encoder_hidden: Tensor,
}

/// Backbone plus one adapter per encoder and decoder layer.
#[derive(Debug)]
pub struct AdaptedModel {
    backbone: Backbone,
    spec: AdapterSpec,
    adapter_store: ParamStore,
    layers: Layers,
    enc_adapters: Vec<Adapter>,
    dec_adapters: Vec<Adapter>,
    backbone_trainable: bool,
}

pub fn attach_adapter(backbone: Backbone, spec: &AdapterSpec) -> Result<(AdaptedModel, ParameterPartition)> {
    let cfg = backbone.config.clone();
    let mut adapter_store = ParamStore::new(spec.init_seed, cfg.precision.dtype());
    let enc_adapters = (0..cfg.num_layers)
        .map(|i| Adapter::new(&mut adapter_store, &format!("adapters.encoder.{i}"), cfg.hidden_dim, spec))
        .collect::<Result<Vec<_>>>()?;
    let dec_adapters = (0..cfg.num_layers)
        .map(|i| Adapter::new(&mut adapter_store, &format!("adapters.decoder.{i}"), cfg.hidden_dim, spec))
        .collect::<Result<Vec<_>>>()?;
    let mut store = backbone.store;
    let layers = Layers::build(&mut store, &cfg, false)?;
    let model = AdaptedModel {
        backbone: Backbone { config: cfg, store },
        spec: spec.clone(),
        adapter_store,
        layers,
        enc_adapters,
        dec_adapters,
        backbone_trainable: false,
    };
    let partition = model.partition()?;
    Ok((model, partition))
}

impl AdaptedModel {
    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn adapter_store(&self) -> &ParamStore {
        &self.adapter_store
    }

    pub(crate) fn adapter_store_mut(&mut self) -> &mut ParamStore {
        &mut self.adapter_store
    }

    pub(crate) fn backbone_store_mut(&mut self) -> &mut ParamStore {
        &mut self.backbone.store
    }

    pub fn backbone_trainable(&self) -> bool {
        self.backbone_trainable
    }

    /// Lets gradients reach the backbone (full fine-tuning).
    pub fn set_backbone_trainable(&mut self, trainable: bool) -> Result<()> {
        let cfg = self.backbone.config.clone();
        self.layers = Layers::build(&mut self.backbone.store, &cfg, trainable)?;
        self.backbone_trainable = trainable;
        Ok(())
    }

    /// Variables the optimizer may update.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut vars = self.adapter_store.vars();
        if self.backbone_trainable {
            vars.extend(self.backbone.store.vars());
        }
        vars
    }

    pub fn partition(&self) -> Result<ParameterPartition> {
        Ok(ParameterPartition {
            frozen_count: self.backbone.num_params(),
            trainable_count: self.adapter_store.num_params(),
            frozen_checksum: self.backbone.checksum()?,
        })
    }

    /// Fails if the backbone drifted from `expected` while it should be frozen.
    pub fn verify_frozen(&self, expected: &str) -> Result<()> {
        if self.backbone_trainable {
            return Ok(());
        }
        let actual = self.backbone.checksum()?;
        if actual != expected {
            return Err(Error::Integrity(format!(
                "frozen backbone checksum changed: expected {expected}, found {actual}"
            )));
        }
        Ok(())
    }

    fn embed(&self, ids: &Tensor, pos: &Embedding, norm: &LayerNorm) -> Result<Tensor> {
        let (_, len) = ids.dims2()?;
        let positions: Vec<u32> = (0..len).map(|p| (p + POSITION_OFFSET) as u32).collect();
        let pos_ids = Tensor::from_vec(positions, (1, len), ids.device())?;
        let tok = self.layers.shared.forward(ids)?;
        let pos = pos.forward(&pos_ids)?;
        norm.forward(&tok.broadcast_add(&pos)?)
    }

    pub fn encode(&self, src_ids: &Tensor, src_mask: &Tensor, use_adapters: bool) -> Result<Tensor> {
        let (_, len) = src_ids.dims2()?;
        self.check_len(len)?;
        let bias = padding_bias(src_mask)?;
        let mut x = self.embed(src_ids, &self.layers.enc_pos, &self.layers.enc_emb_norm)?;
        for (layer, adapter) in self.layers.encoder.iter().zip(&self.enc_adapters) {
            x = layer.forward(&x, &bias, use_adapters.then_some(adapter))?;
        }
        Ok(x)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let max = self.backbone.config.max_positions;
        if len > max {
            return Err(Error::SequenceTooLong { len, max });
        }
        Ok(())
    }

    pub fn forward(
        &self,
        src_ids: &Tensor,
        src_mask: &Tensor,
        dec_ids: &Tensor,
        dec_mask: &Tensor,
        use_adapters: bool,
    ) -> Result<ForwardOutput> {
        let encoder_hidden = self.encode(src_ids, src_mask, use_adapters)?;
        let (_, len) = dec_ids.dims2()?;
        self.check_len(len)?;
        let dtype = encoder_hidden.dtype();
        let self_bias = causal_bias(len, dtype, dec_ids.device())?.broadcast_add(&padding_bias(dec_mask)?)?;
        let cross_bias = padding_bias(src_mask)?;
        let mut x = self.embed(dec_ids, &self.layers.dec_pos, &self.layers.dec_emb_norm)?;
        for (layer, adapter) in self.layers.decoder.iter().zip(&self.dec_adapters) {
            x = layer.forward(&x, &self_bias, &encoder_hidden, &cross_bias, use_adapters.then_some(adapter))?;
        }
        let logits = x
            .broadcast_matmul(&self.layers.shared.weight().t()?)?
            .broadcast_add(&self.layers.logits_bias)?;
        Ok(ForwardOutput { logits, decoder_hidden: x, encoder_hidden })
    }

    pub fn forward_batch(&self, batch: &Seq2SeqBatch) -> Result<ForwardOutput> {
        self.forward(&batch.src_ids, &batch.src_mask, &batch.dec_ids, &batch.dec_mask, true)
    }

    /// Differentiable pooled expression embedding for every row that has one
    /// on the requested side. Rows without one yield `None`.
    pub fn ie_embeddings(
        &self,
        out: &ForwardOutput,
        batch: &Seq2SeqBatch,
        side: ExtractionSide,
    ) -> Result<Vec<Option<Tensor>>> {
        (0..batch.len())
            .map(|b| match side {
                ExtractionSide::Decoder => {
                    extract_ie_embedding(&out.decoder_hidden, b, batch.ie_dec_spans[b], batch.dec_lens[b]).map(Some)
                }
                ExtractionSide::Encoder => match batch.ie_src_spans[b] {
                    Some(span) => extract_ie_embedding(&out.encoder_hidden, b, span, batch.src_lens[b]).map(Some),
                    None => Ok(None),
                },
            })
            .collect()
    }
}

/// Mean of `hidden[row, span]`; `valid_len` is the row's unpadded length.
pub fn extract_ie_embedding(hidden: &Tensor, row: usize, span: TokenSpan, valid_len: usize) -> Result<Tensor> {
    let (_, len, _) = hidden.dims3()?;
    if span.width() == 0 || span.end_token > len || span.start_token >= valid_len {
        return Err(Error::Validation(format!(
            "span [{}, {}) lies outside the {valid_len} valid positions",
            span.start_token, span.end_token
        )));
    }
    let end = span.end_token.min(valid_len);
    Ok(hidden.i((row, span.start_token..end))?.mean(0)?)
}

/// Mean pooling of plain rows over `span`.
pub fn mean_pool(rows: &[Vec<f64>], span: TokenSpan) -> Result<Vec<f64>> {
    if span.width() == 0 || span.end_token > rows.len() {
        return Err(Error::Validation(format!(
            "span [{}, {}) outside {} rows",
            span.start_token,
            span.end_token,
            rows.len()
        )));
    }
    let dim = rows[span.start_token].len();
    let mut out = vec![0.0; dim];
    for row in &rows[span.range()] {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = span.width() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}
