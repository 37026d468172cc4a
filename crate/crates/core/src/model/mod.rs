//! Encoder-decoder backbone with per-layer bottleneck adapters.

pub mod adapter;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod params;
pub mod transformer;

pub use adapter::{adapter_param_count, Adapter};
pub use batch::Seq2SeqBatch;
pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointFiles, CheckpointMeta};
pub use config::{Activation, AdapterSpec, BackboneConfig, ExtractionSide, Precision};
pub use params::{Init, ParamStore};
pub use transformer::{
    attach_adapter, extract_ie_embedding, mean_pool, AdaptedModel, Backbone, ForwardOutput, ParameterPartition,
};
