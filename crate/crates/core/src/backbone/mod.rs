//! Small deterministic transformer backbone, tokenizer and checkpoint format.

mod checkpoint;
mod config;
pub(crate) mod model;
mod tokenizer;

pub use checkpoint::{Manifest, ManifestEntry};
pub use config::{Architecture, ModelConfig};
pub use model::{argmax, mask_tokens, next_token_targets, Backbone, DropoutMode, ForwardCtx, LmLoss, TokenBatch};
pub use tokenizer::{pretokenize, Piece, Tokenizer, BOS, EOS, MASK, PAD, SPECIAL_TOKENS, UNK};
