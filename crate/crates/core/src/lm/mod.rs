//! Byte-level decoder LM with attention-input adapters.

pub mod adapter;
pub mod decoder;
pub mod merge;
pub mod tokenizer;

pub use adapter::{Adapter, AdapterKind, AdapterSpec, UpMap};
pub use decoder::{DecoderConfig, DecoderLm, Hidden, PromptSequence, VisualTokens};
pub use merge::merge_linear_adapter;
