//! The frozen base language model: a small pre-LN causal transformer over
//! character tokens, with adapter attachment points at the query and value
//! projections of every block.

mod checkpoint;
mod config;
mod infer;
mod model;
pub mod tokenizer;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, PretrainConfig};
pub use model::{
    perplexity_from_log_probs, pretrain_base, AdapterRef, AttachPoint, Logits, Prepared,
    SampleParams, TinyLM, GREEDY_TEMPERATURE,
};
pub use tokenizer::CharTokenizer;
