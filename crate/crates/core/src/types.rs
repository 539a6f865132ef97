//! Domain value types shared by every stage of the engine.
//!
//! All of these are plain immutable values once constructed. The ones with
//! structural invariants (triggers, reasoning traces, results) validate on
//! construction and on deserialization.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use base64::engine::general_purpose::STANDARD as BASE64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opening delimiter of a reasoning block.
pub const REASONING_OPEN: &str = "<REASONING>";
/// Closing delimiter of a reasoning block. Constrained decoding starts after it.
pub const REASONING_CLOSE: &str = "</REASONING>";
/// Terminal token appended to every instruction before trie insertion.
pub const END_OF_SEQUENCE: &str = "<EOS>";

/// Maximum number of instructions in one recommendation.
pub const MAX_RECOMMENDATIONS: usize = 3;

/// Metadata key under which callers may pass a textual description of an image.
pub const OCR_TEXT_KEY: &str = "ocr_text";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeError {
    #[error("malformed reasoning: {0}")]
    MalformedReasoning(String),
    #[error("invalid trigger: {0}")]
    InvalidTrigger(String),
    #[error("invalid recommendation result: {0}")]
    InvalidResult(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// Where the pixels of an image trigger live. The engine never decodes them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    Path(PathBuf),
    #[serde(with = "base64_bytes")]
    Base64(Vec<u8>),
}

impl ImageRef {
    /// Raw bytes of the image, reading from disk for path references.
    pub fn bytes(&self) -> std::io::Result<Vec<u8>> {
        match self {
            ImageRef::Path(p) => std::fs::read(p),
            ImageRef::Base64(b) => Ok(b.clone()),
        }
    }
}

mod base64_bytes {
    use super::BASE64;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&BASE64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        BASE64.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

/// The object a user selected: either a text body or an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TriggerRepr", into = "TriggerRepr")]
pub struct Trigger {
    id: String,
    modality: Modality,
    text: Option<String>,
    image: Option<ImageRef>,
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TriggerRepr {
    id: String,
    modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<ImageRef>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

impl TryFrom<TriggerRepr> for Trigger {
    type Error = TypeError;

    fn try_from(r: TriggerRepr) -> Result<Self, Self::Error> {
        if r.id.is_empty() {
            return Err(TypeError::InvalidTrigger("empty id".into()));
        }
        match (r.modality, &r.text, &r.image) {
            (Modality::Text, Some(_), None) | (Modality::Image, None, Some(_)) => {}
            (m, _, _) => {
                return Err(TypeError::InvalidTrigger(format!(
                    "trigger {:?} with modality {m:?} must carry exactly the matching payload",
                    r.id
                )))
            }
        }
        Ok(Trigger {
            id: r.id,
            modality: r.modality,
            text: r.text,
            image: r.image,
            metadata: r.metadata,
        })
    }
}

impl From<Trigger> for TriggerRepr {
    fn from(t: Trigger) -> Self {
        TriggerRepr {
            id: t.id,
            modality: t.modality,
            text: t.text,
            image: t.image,
            metadata: t.metadata,
        }
    }
}

impl Trigger {
    pub fn text(id: impl Into<String>, text: impl Into<String>) -> Result<Self, TypeError> {
        TriggerRepr {
            id: id.into(),
            modality: Modality::Text,
            text: Some(text.into()),
            image: None,
            metadata: BTreeMap::new(),
        }
        .try_into()
    }

    pub fn image(id: impl Into<String>, image: ImageRef) -> Result<Self, TypeError> {
        TriggerRepr {
            id: id.into(),
            modality: Modality::Image,
            text: None,
            image: Some(image),
            metadata: BTreeMap::new(),
        }
        .try_into()
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn text_body(&self) -> Option<&str> {
        self.text.as_deref()
    }

    pub fn image_ref(&self) -> Option<&ImageRef> {
        self.image.as_ref()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Text shown to the model for this trigger: the body of a text trigger,
    /// or the caller-supplied OCR description of an image.
    pub fn describe(&self) -> String {
        match self.modality {
            Modality::Text => format!("[text] {}", self.text.as_deref().unwrap_or_default()),
            Modality::Image => match self.metadata.get(OCR_TEXT_KEY) {
                Some(ocr) => format!("[image] {ocr}"),
                None => "[image] (attached)".to_string(),
            },
        }
    }
}

/// A registered instruction. `token_ids` is filled by the instruction library.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub surface: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_ids: Vec<u32>,
}

impl Instruction {
    pub fn new(id: impl Into<String>, surface: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            surface: surface.into(),
            token_ids: Vec::new(),
        }
    }
}

/// One worked example inside a construction prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InContextExample {
    pub trigger: String,
    pub reasoning: String,
    pub instruction: String,
}

/// A prompt body, optionally carrying in-context examples. Prompts with
/// examples are construction prompts; prompts without are inference prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_context_examples: Option<Vec<InContextExample>>,
}

impl Prompt {
    pub fn inference(body: impl Into<String>) -> Self {
        Self {
            body: body.into(),
            in_context_examples: None,
        }
    }

    pub fn construction(body: impl Into<String>, examples: Vec<InContextExample>) -> Self {
        Self {
            body: body.into(),
            in_context_examples: Some(examples),
        }
    }

    pub fn is_construction(&self) -> bool {
        self.in_context_examples.is_some()
    }

    /// Flattened text sent to a backend.
    pub fn render(&self) -> String {
        let mut out = self.body.clone();
        if let Some(examples) = &self.in_context_examples {
            for (i, ex) in examples.iter().enumerate() {
                out.push_str(&format!(
                    "\n\n### Example {}\nTrigger: {}\n{}\nInstruction: {}",
                    i + 1,
                    ex.trigger,
                    ex.reasoning,
                    ex.instruction
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    EntityRecognition,
    ContextualRelevance,
    InstructionGeneration,
}

impl Stage {
    pub const ALL: [Stage; 3] = [
        Stage::EntityRecognition,
        Stage::ContextualRelevance,
        Stage::InstructionGeneration,
    ];

    /// Line prefix that opens this stage inside a reasoning block.
    pub fn label(self) -> &'static str {
        match self {
            Stage::EntityRecognition => "Entity Recognition:",
            Stage::ContextualRelevance => "Contextual Relevance:",
            Stage::InstructionGeneration => "Instruction Generation:",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label().trim_end_matches(':'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub stage: Stage,
    pub text: String,
}

/// Structured reasoning delimited by `<REASONING>` / `</REASONING>`.
///
/// The body is a sequence of stage sections, each opened by a line that starts
/// with the stage label (`Entity Recognition:` and so on). A body without any
/// stage label is accepted as free text with no steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TraceRepr")]
pub struct ReasoningTrace {
    pub steps: Vec<ReasoningStep>,
    pub raw: String,
}

#[derive(Deserialize)]
struct TraceRepr {
    steps: Vec<ReasoningStep>,
    raw: String,
}

impl TryFrom<TraceRepr> for ReasoningTrace {
    type Error = TypeError;

    fn try_from(r: TraceRepr) -> Result<Self, Self::Error> {
        let t = ReasoningTrace {
            steps: r.steps,
            raw: r.raw,
        };
        t.validate()?;
        Ok(t)
    }
}

impl ReasoningTrace {
    /// Strict parse: `raw` must start with the opening delimiter and end with
    /// the closing one, with no nested delimiters in between.
    pub fn parse(raw: &str) -> Result<Self, TypeError> {
        let inner = raw
            .strip_prefix(REASONING_OPEN)
            .ok_or_else(|| TypeError::MalformedReasoning(format!("missing leading {REASONING_OPEN}")))?
            .strip_suffix(REASONING_CLOSE)
            .ok_or_else(|| TypeError::MalformedReasoning(format!("missing trailing {REASONING_CLOSE}")))?;
        if inner.contains(REASONING_OPEN) || inner.contains(REASONING_CLOSE) {
            return Err(TypeError::MalformedReasoning("nested delimiter".into()));
        }
        let steps = parse_steps(inner)?;
        Ok(Self {
            steps,
            raw: raw.to_string(),
        })
    }

    /// Finds the first delimited block inside free model output and parses it.
    pub fn extract(text: &str) -> Result<Self, TypeError> {
        let start = text
            .find(REASONING_OPEN)
            .ok_or_else(|| TypeError::MalformedReasoning(format!("no {REASONING_OPEN} in output")))?;
        let rest = &text[start..];
        let end = rest
            .find(REASONING_CLOSE)
            .ok_or_else(|| TypeError::MalformedReasoning(format!("no {REASONING_CLOSE} in output")))?;
        Self::parse(&rest[..end + REASONING_CLOSE.len()])
    }

    /// Canonical rendering of a list of steps.
    pub fn from_steps(steps: Vec<ReasoningStep>) -> Result<Self, TypeError> {
        let mut raw = String::from(REASONING_OPEN);
        raw.push('\n');
        for s in &steps {
            raw.push_str(s.stage.label());
            raw.push(' ');
            raw.push_str(s.text.trim());
            raw.push('\n');
        }
        raw.push_str(REASONING_CLOSE);
        let parsed = Self::parse(&raw)?;
        if parsed.steps != steps {
            return Err(TypeError::MalformedReasoning(
                "steps do not survive rendering (out of order, duplicated or untrimmed)".into(),
            ));
        }
        Ok(parsed)
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        let reparsed = Self::parse(&self.raw)?;
        if reparsed.steps != self.steps {
            return Err(TypeError::MalformedReasoning("steps disagree with raw text".into()));
        }
        Ok(())
    }

    /// True when all three stages are present.
    pub fn is_complete(&self) -> bool {
        self.steps.len() == Stage::ALL.len()
    }

    pub fn step(&self, stage: Stage) -> Option<&str> {
        self.steps
            .iter()
            .find(|s| s.stage == stage)
            .map(|s| s.text.as_str())
    }

    /// Reasoning content without delimiters or stage labels. This is what
    /// gets embedded for template retrieval.
    pub fn content_text(&self) -> String {
        if self.steps.is_empty() {
            let inner = &self.raw[REASONING_OPEN.len()..self.raw.len() - REASONING_CLOSE.len()];
            inner.trim().to_string()
        } else {
            self.steps
                .iter()
                .map(|s| s.text.as_str())
                .collect::<Vec<_>>()
                .join("\n")
        }
    }
}

fn stage_at_line_start(line: &str) -> Option<(Stage, &str)> {
    let trimmed = line.trim_start();
    Stage::ALL
        .iter()
        .find_map(|&st| trimmed.strip_prefix(st.label()).map(|rest| (st, rest)))
}

fn parse_steps(inner: &str) -> Result<Vec<ReasoningStep>, TypeError> {
    let mut steps: Vec<ReasoningStep> = Vec::new();
    let mut preamble = String::new();
    for line in inner.lines() {
        if let Some((stage, rest)) = stage_at_line_start(line) {
            if let Some(prev) = steps.last() {
                if stage <= prev.stage {
                    return Err(TypeError::MalformedReasoning(format!(
                        "stage {stage} appears after {}",
                        prev.stage
                    )));
                }
            }
            steps.push(ReasoningStep {
                stage,
                text: rest.trim().to_string(),
            });
        } else if let Some(cur) = steps.last_mut() {
            if !line.trim().is_empty() {
                if !cur.text.is_empty() {
                    cur.text.push('\n');
                }
                cur.text.push_str(line.trim());
            }
        } else {
            preamble.push_str(line);
        }
    }
    if !steps.is_empty() && !preamble.trim().is_empty() {
        return Err(TypeError::MalformedReasoning(
            "text before the first stage label".into(),
        ));
    }
    Ok(steps)
}

/// Output envelope of one recommendation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationResult {
    pub trigger_id: String,
    pub reasoning: ReasoningTrace,
    pub template_used: Option<String>,
    pub instructions: Vec<String>,
    pub scores: Vec<f64>,
}

impl RecommendationResult {
    /// Checks the list-shape invariants. Library membership is checked by the
    /// caller, which owns the library.
    pub fn validate(&self) -> Result<(), TypeError> {
        let n = self.instructions.len();
        if n == 0 || n > MAX_RECOMMENDATIONS {
            return Err(TypeError::InvalidResult(format!("{n} instructions, expected 1..=3")));
        }
        if self.scores.len() != n {
            return Err(TypeError::InvalidResult("scores not parallel to instructions".into()));
        }
        for (i, id) in self.instructions.iter().enumerate() {
            if self.instructions[..i].contains(id) {
                return Err(TypeError::InvalidResult(format!("duplicate instruction {id}")));
            }
        }
        if self.scores.windows(2).any(|w| w[0] < w[1]) {
            return Err(TypeError::InvalidResult("scores increase".into()));
        }
        Ok(())
    }
}
