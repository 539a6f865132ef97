//! End-to-end orchestration.
//!
//! Inference runs four stages against a read snapshot of the trie and the
//! template library:
//!
//! 1. initial reasoning from the inference prompt,
//! 2. template retrieval on that initial reasoning,
//! 3. one refinement pass when a template matched,
//! 4. trie-constrained top-k decoding after the closing reasoning delimiter.
//!
//! Dataset construction feeds the gold instruction to the backend and keeps
//! the returned reasoning for SFT export.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::Serialize;
use thiserror::Error;

use crate::backend::{BackendError, BackendRequest, ModelBackend};
use crate::prompts;
use crate::templates::{RetrievalConfig, TemplateError, TemplateLibrary};
use crate::tokenizer::{TokenId, Tokenizer};
use crate::trie::{InstructionLibrary, InstructionTrie, ScorerError, SharedTrie, TrieError};
use crate::types::{Instruction, Prompt, ReasoningTrace, RecommendationResult, Trigger, TypeError, MAX_RECOMMENDATIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineStage {
    Construction,
    InitialReasoning,
    Retrieval,
    Refinement,
    Decoding,
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PipelineStage::Construction => "construction",
            PipelineStage::InitialReasoning => "initial reasoning",
            PipelineStage::Retrieval => "retrieval",
            PipelineStage::Refinement => "refinement",
            PipelineStage::Decoding => "decoding",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Reasoning(#[from] TypeError),
    #[error(transparent)]
    Retrieval(#[from] TemplateError),
    #[error(transparent)]
    Decode(#[from] TrieError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: PipelineStage,
        #[source]
        source: StageError,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Trie(#[from] TrieError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Backend error behind this failure, if any (including one wrapped by the
    /// decoder's scorer).
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            PipelineError::Stage { source: StageError::Backend(e), .. } => Some(e),
            PipelineError::Stage {
                source: StageError::Decode(TrieError::ScorerFailure(inner)),
                ..
            } => inner.downcast_ref::<BackendError>(),
            _ => None,
        }
    }
}

fn at<E: Into<StageError>>(stage: PipelineStage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: e.into(),
    }
}

/// Result of [`Engine::infer_traced`]: the recommendation plus what led to it.
#[derive(Debug, Clone)]
pub struct Inference {
    pub result: RecommendationResult,
    pub initial_reasoning: ReasoningTrace,
    pub similarity: Option<f64>,
    pub trie_generation: u64,
}

pub struct Engine {
    backend: Arc<dyn ModelBackend>,
    tokenizer: Arc<dyn Tokenizer>,
    trie: SharedTrie,
    templates: RwLock<TemplateLibrary>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("trie_generation", &self.trie.snapshot().generation())
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(
        backend: Arc<dyn ModelBackend>,
        tokenizer: Arc<dyn Tokenizer>,
        trie: InstructionTrie,
        templates: TemplateLibrary,
    ) -> Self {
        Self {
            backend,
            tokenizer,
            trie: SharedTrie::new(trie),
            templates: RwLock::new(templates),
        }
    }

    pub fn trie(&self) -> Arc<InstructionTrie> {
        self.trie.snapshot()
    }

    pub fn tokenizer(&self) -> &Arc<dyn Tokenizer> {
        &self.tokenizer
    }

    pub fn templates(&self) -> RwLockReadGuard<'_, TemplateLibrary> {
        self.templates.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn templates_mut(&self) -> RwLockWriteGuard<'_, TemplateLibrary> {
        self.templates.write().unwrap_or_else(|e| e.into_inner())
    }

    /// Rebuilds and publishes the trie for a changed instruction library.
    pub fn replace_instructions(&self, library: &InstructionLibrary) -> Result<u64, PipelineError> {
        Ok(self.trie.rebuild(library, self.tokenizer.as_ref())?)
    }

    fn reasoning(&self, stage: PipelineStage, prompt: Prompt, trigger: &Trigger) -> Result<ReasoningTrace, PipelineError> {
        let text = self
            .backend
            .generate_text(&BackendRequest::generate(prompt, trigger.clone()))
            .map_err(at(stage))?;
        ReasoningTrace::extract(&text).map_err(at(stage))
    }

    /// Builds one reasoning trace for a (trigger, gold instruction) pair.
    pub fn construct_reasoning_sample(
        &self,
        construction_prompt: &Prompt,
        trigger: &Trigger,
        gold: &Instruction,
    ) -> Result<ReasoningTrace, PipelineError> {
        if !construction_prompt.is_construction() {
            return Err(PipelineError::Precondition(
                "construction requires a prompt with in-context examples".into(),
            ));
        }
        let trie = self.trie.snapshot();
        match trie.library().get(&gold.id) {
            Some(ins) if ins.surface == gold.surface => {}
            _ => {
                return Err(PipelineError::Precondition(format!(
                    "gold instruction {:?} is not in the library",
                    gold.id
                )))
            }
        }
        let prompt = prompts::construction_request(construction_prompt, trigger, &gold.surface);
        let trace = self.reasoning(PipelineStage::Construction, prompt, trigger)?;
        if !trace.is_complete() {
            return Err(at(PipelineStage::Construction)(TypeError::MalformedReasoning(format!(
                "expected 3 stages, found {}",
                trace.steps.len()
            ))));
        }
        Ok(trace)
    }

    pub fn infer(&self, trigger: &Trigger, cfg: &RetrievalConfig, k: usize) -> Result<RecommendationResult, PipelineError> {
        Ok(self.infer_traced(trigger, cfg, k)?.result)
    }

    pub fn infer_traced(&self, trigger: &Trigger, cfg: &RetrievalConfig, k: usize) -> Result<Inference, PipelineError> {
        if k == 0 || k > MAX_RECOMMENDATIONS {
            return Err(PipelineError::Precondition(format!("k = {k} outside 1..=3")));
        }
        let trie = self.trie.snapshot();

        let initial = self.reasoning(PipelineStage::InitialReasoning, prompts::inference(trigger), trigger)?;

        // Retrieval always reads the initial reasoning. The template is cloned
        // so the library lock is not held across the refinement call.
        let matched = {
            let lib = self.templates();
            lib.retrieve(trigger.id(), &initial, cfg)
                .map_err(at(PipelineStage::Retrieval))?
                .map(|r| (r.template.spec().clone(), r.similarity))
        };

        let (reasoning, template_used, similarity) = match matched {
            Some((spec, sim)) => {
                let prompt = prompts::refinement(&spec.name, &spec.steps, trigger);
                let refined = self.reasoning(PipelineStage::Refinement, prompt, trigger)?;
                (refined, Some(spec.id), Some(sim))
            }
            None => (initial.clone(), None, None),
        };

        let decode_prompt = prompts::decode(trigger, &reasoning);
        let vocab_size = trie.vocab_size();
        let mut scorer = |prefix: &[TokenId]| -> Result<Vec<f64>, ScorerError> {
            let req = BackendRequest::score(decode_prompt.clone(), trigger.clone(), prefix.to_vec());
            self.backend
                .score_tokens(&req, vocab_size)
                .map_err(|e| Box::new(e) as ScorerError)
        };
        let k = k.min(trie.library().len());
        let decoded = trie
            .top_k_decode(&mut scorer, k)
            .map_err(at(PipelineStage::Decoding))?;

        let result = RecommendationResult {
            trigger_id: trigger.id().to_string(),
            reasoning,
            template_used,
            instructions: decoded.iter().map(|d| d.instruction_id.clone()).collect(),
            scores: decoded.iter().map(|d| d.score).collect(),
        };
        result
            .validate()
            .map_err(|e| PipelineError::Invariant(e.to_string()))?;
        if let Some(bad) = result.instructions.iter().find(|id| !trie.library().contains(id)) {
            return Err(PipelineError::Invariant(format!("{bad} is not a library instruction")));
        }
        Ok(Inference {
            result,
            initial_reasoning: initial,
            similarity,
            trie_generation: trie.generation(),
        })
    }
}

/// One (trigger, instruction, reasoning) triple bound for SFT export.
#[derive(Debug, Clone, PartialEq)]
pub struct SftSample {
    pub trigger: Trigger,
    pub instruction: Instruction,
    pub reasoning: ReasoningTrace,
}

#[derive(Serialize)]
struct SftLine<'a> {
    trigger: &'a Trigger,
    reasoning: &'a str,
    instruction: &'a str,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExportReport {
    pub written: usize,
    /// (sample index, reason) for every skipped sample.
    pub skipped: Vec<(usize, String)>,
}

/// Writes one JSON object per valid sample:
/// `{"trigger": {...}, "reasoning": "<REASONING>...</REASONING>", "instruction": "..."}`.
pub fn export_sft_dataset(samples: &[SftSample], path: &Path) -> Result<ExportReport, PipelineError> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut report = ExportReport::default();
    for (i, s) in samples.iter().enumerate() {
        if let Err(e) = s.reasoning.validate() {
            report.skipped.push((i, e.to_string()));
            continue;
        }
        let line = SftLine {
            trigger: &s.trigger,
            reasoning: &s.reasoning.raw,
            instruction: &s.instruction.surface,
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        report.written += 1;
    }
    out.flush()?;
    Ok(report)
}

/// Distinct instruction ids of a library, for membership checks.
pub fn library_ids(library: &InstructionLibrary) -> BTreeSet<String> {
    library.iter().map(|i| i.id.clone()).collect()
}
