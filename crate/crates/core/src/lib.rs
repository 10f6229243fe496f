//! Semantic-fusion language-modeling workbench.
//!
//! A self-contained pipeline around a small encoder-style Transformer whose
//! token embeddings are fused with an explicit fuzzy-membership feature
//! channel: synthetic corpus generation, training with a composite objective,
//! grammar-constrained controllable decoding, and a metrics harness.

pub mod cli;
pub mod corpus;
pub mod decoder;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod semantics;
pub mod training;

pub use corpus::{CorpusError, Lexicon, Vocabulary};
pub use decoder::{DecodeConfig, DecoderError, Generator, GrammarState, Preset};
pub use evaluation::{EvalError, EvalReport};
pub use model::{Model, ModelConfig, ModelError, Variant};
pub use numerics::{NumericsError, Tape};
pub use semantics::{SemanticMatrix, SemanticsError};
pub use training::{TrainConfig, TrainingError};
