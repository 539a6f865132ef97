//! Instruction recommendation engine.
//!
//! A trigger (text or image) is analysed into a three-stage reasoning trace,
//! optionally refined with a retrieved reasoning template, and then mapped to
//! registered instructions by decoding over a token prefix tree.

pub mod backend;
pub mod embedding;
pub mod evaluation;
pub mod pipeline;
pub mod prompts;
pub mod templates;
pub mod tokenizer;
pub mod trie;
pub mod types;

pub use backend::{BackendError, BackendRequest, HttpBackend, MockBackend, MockScript, Mode, ModelBackend};
pub use embedding::{cosine_similarity, Embedder, EmbeddingError, EmbeddingVector, HashedBagOfWords};
pub use evaluation::{compute_metrics, delta_sweep, EvalError, EvalSample, Metrics, SweepTable};
pub use pipeline::{export_sft_dataset, Engine, PipelineError, PipelineStage, SftSample};
pub use templates::{Insertion, RetrievalConfig, TemplateError, TemplateLibrary, TemplateSpec};
pub use tokenizer::{build_vocabulary, TokenId, Tokenizer, TokenizerError, Vocabulary};
pub use trie::{build_trie, InstructionLibrary, InstructionTrie, SharedTrie, TrieError};
pub use types::{
    ImageRef, Instruction, Modality, Prompt, ReasoningTrace, RecommendationResult, Stage, Trigger, TypeError,
};
