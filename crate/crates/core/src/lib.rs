//! Idiom embeddings learned by a small adapter on a frozen encoder-decoder,
//! with the corpus handling, training loop and evaluation around it.

pub mod bank;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod noising;
pub mod training;
pub mod variant;

pub use bank::{BankKind, EmbeddingBank};
pub use corpus::{Corpus, Dictionary, IdiomEntry, MeaningGroups, PieInstance, Sense, Split, TokenSpan, Tokenizer};
pub use error::{Error, ErrorKind, Result};
pub use eval::{EvalReport, IntrinsicReport};
pub use model::{AdaptedModel, AdapterSpec, BackboneConfig};
pub use noising::{CorruptionExample, NoisingPolicy};
pub use training::TrainConfig;
pub use variant::Variant;
