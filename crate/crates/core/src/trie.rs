//! Token prefix tree over the instruction library and the decoders that walk it.
//!
//! Every instruction is tokenized, `<EOS>` is appended, and the resulting
//! sequence is inserted into an arena of nodes keyed by token id. The node
//! reached after `<EOS>` is the terminal for that instruction; because every
//! sequence ends in `<EOS>` no sequence is a prefix of another.
//!
//! Decoding never trusts the scorer: at each node only the node's children are
//! eligible, so whatever logits come back the walk ends on a terminal.

use std::collections::{BTreeMap, HashMap};
use std::error::Error as StdError;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::tokenizer::{TokenId, Tokenizer, TokenizerError};
use crate::types::Instruction;

/// Beam width used by [`InstructionTrie::top_k_decode`]. A trie over `n`
/// instructions never has more than `n` live nodes at one depth, so for
/// libraries up to this size the beam never prunes and the result is exact.
pub const DEFAULT_BEAM_WIDTH: usize = 64;

pub type ScorerError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum TrieError {
    #[error("instruction library is empty")]
    EmptyLibrary,
    #[error("duplicate instruction id {0:?}")]
    DuplicateId(String),
    #[error("instruction {0:?} has an empty surface")]
    EmptySurface(String),
    #[error("instructions {0:?} and {1:?} tokenize identically")]
    DuplicateTokens(String, String),
    #[error("instruction {0:?} contains the end-of-sequence token")]
    ReservedToken(String),
    #[error("unknown instruction id {0:?}")]
    UnknownInstruction(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("prefix {0:?} leaves the trie")]
    InvalidPrefix(Vec<TokenId>),
    #[error("expected {expected} logits, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("valid token set is empty")]
    EmptyValidSet,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("k = {k} exceeds library size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("scorer failed: {0}")]
    ScorerFailure(#[source] ScorerError),
}

/// A validated set of candidate instructions (unique ids, non-empty surfaces).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionLibrary {
    instructions: Vec<Instruction>,
    by_id: HashMap<String, usize>,
}

impl InstructionLibrary {
    pub fn new(instructions: Vec<Instruction>) -> Result<Self, TrieError> {
        if instructions.is_empty() {
            return Err(TrieError::EmptyLibrary);
        }
        let mut by_id = HashMap::with_capacity(instructions.len());
        for (i, ins) in instructions.iter().enumerate() {
            if ins.surface.trim().is_empty() {
                return Err(TrieError::EmptySurface(ins.id.clone()));
            }
            if by_id.insert(ins.id.clone(), i).is_some() {
                return Err(TrieError::DuplicateId(ins.id.clone()));
            }
        }
        Ok(Self { instructions, by_id })
    }

    /// Parses a JSON array of `{"id", "surface"}` objects.
    pub fn from_json(json: &str) -> Result<Self, Box<dyn StdError + Send + Sync>> {
        let list: Vec<Instruction> = serde_json::from_str(json)?;
        Ok(Self::new(list)?)
    }

    pub fn get(&self, id: &str) -> Option<&Instruction> {
        self.by_id.get(id).map(|&i| &self.instructions[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Instruction> {
        self.instructions.iter()
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.instructions.iter().map(|i| i.surface.as_str()).collect()
    }

    pub fn with_added(&self, ins: Instruction) -> Result<Self, TrieError> {
        let mut list = self.instructions.clone();
        list.push(ins);
        Self::new(list)
    }

    pub fn without(&self, id: &str) -> Result<Self, TrieError> {
        if !self.contains(id) {
            return Err(TrieError::UnknownInstruction(id.to_string()));
        }
        Self::new(self.instructions.iter().filter(|i| i.id != id).cloned().collect())
    }
}

/// Masks every position outside `valid` to negative infinity. The input is
/// left untouched.
pub fn mask_logits(logits: &[f64], valid: &[TokenId], vocab_size: usize) -> Result<Vec<f64>, TrieError> {
    if logits.len() != vocab_size {
        return Err(TrieError::DimensionMismatch {
            expected: vocab_size,
            got: logits.len(),
        });
    }
    if valid.is_empty() {
        return Err(TrieError::EmptyValidSet);
    }
    let mut out = vec![f64::NEG_INFINITY; vocab_size];
    for &t in valid {
        let slot = out.get_mut(t as usize).ok_or(TrieError::TokenOutOfRange(t))?;
        *slot = logits[t as usize];
    }
    Ok(out)
}

/// Next-token scoring: given the tokens emitted so far inside the constrained
/// region, return one logit per vocabulary id.
pub trait TokenScorer {
    fn score(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>, ScorerError>;
}

impl<F> TokenScorer for F
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>, ScorerError>,
{
    fn score(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>, ScorerError> {
        self(prefix)
    }
}

/// One decoded instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub instruction_id: String,
    /// Tokens walked from the root, `<EOS>` included.
    pub tokens: Vec<TokenId>,
    /// Sum of the selected logits along the path.
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<TokenId, usize>,
    terminal: Option<usize>,
}

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
pub struct InstructionTrie {
    nodes: Vec<Node>,
    library: InstructionLibrary,
    vocab_size: usize,
    eos: TokenId,
    generation: u64,
}

const ROOT: usize = 0;

/// Tokenizes the library and builds its trie. Linear in the total token count.
pub fn build_trie<T: Tokenizer + ?Sized>(
    library: &InstructionLibrary,
    tokenizer: &T,
) -> Result<InstructionTrie, TrieError> {
    let eos = tokenizer.special_ids().end_of_sequence;
    let mut nodes = vec![Node::default()];
    let mut instructions = Vec::with_capacity(library.len());
    for (idx, ins) in library.iter().enumerate() {
        let token_ids = tokenizer.encode(&ins.surface)?;
        if token_ids.contains(&eos) {
            return Err(TrieError::ReservedToken(ins.id.clone()));
        }
        let mut cur = ROOT;
        for &t in token_ids.iter().chain(std::iter::once(&eos)) {
            cur = match nodes[cur].children.get(&t) {
                Some(&next) => next,
                None => {
                    nodes.push(Node::default());
                    let next = nodes.len() - 1;
                    nodes[cur].children.insert(t, next);
                    next
                }
            };
        }
        if let Some(prev) = nodes[cur].terminal {
            return Err(TrieError::DuplicateTokens(
                library.instructions[prev].id.clone(),
                ins.id.clone(),
            ));
        }
        nodes[cur].terminal = Some(idx);
        instructions.push(Instruction {
            token_ids,
            ..ins.clone()
        });
    }
    Ok(InstructionTrie {
        nodes,
        library: InstructionLibrary::new(instructions)?,
        vocab_size: tokenizer.vocab_size(),
        eos,
        generation: NEXT_GENERATION.fetch_add(1, Ordering::SeqCst),
    })
}

/// Position inside a trie. Stepping is a single child lookup.
#[derive(Debug, Clone)]
pub struct TrieCursor<'a> {
    trie: &'a InstructionTrie,
    node: usize,
    path: Vec<TokenId>,
}

impl<'a> TrieCursor<'a> {
    pub fn valid_next(&self) -> impl Iterator<Item = TokenId> + 'a {
        self.trie.nodes[self.node].children.keys().copied()
    }

    pub fn advance(&mut self, token: TokenId) -> Result<(), TrieError> {
        match self.trie.nodes[self.node].children.get(&token) {
            Some(&next) => {
                self.node = next;
                self.path.push(token);
                Ok(())
            }
            None => {
                let mut bad = self.path.clone();
                bad.push(token);
                Err(TrieError::InvalidPrefix(bad))
            }
        }
    }

    pub fn path(&self) -> &[TokenId] {
        &self.path
    }

    pub fn terminal(&self) -> Option<&'a Instruction> {
        self.trie.nodes[self.node]
            .terminal
            .map(|i| &self.trie.library.instructions[i])
    }
}

/// Argmax over the node's children; NaN counts as -inf and ties go to the
/// lowest token id (children iterate in ascending id order).
fn pick_child(node: &Node, logits: &[f64]) -> (TokenId, usize, f64) {
    let mut best: Option<(TokenId, usize, f64)> = None;
    for (&tok, &child) in &node.children {
        let v = logits[tok as usize];
        match best {
            Some((_, _, b)) if rank_key(v) <= rank_key(b) => {}
            _ => best = Some((tok, child, v)),
        }
    }
    best.expect("non-terminal trie nodes have children")
}

fn rank_key(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

struct Hypothesis {
    node: usize,
    path: Vec<TokenId>,
    score: f64,
}

fn by_score_then_tokens(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    rank_key(b.score)
        .total_cmp(&rank_key(a.score))
        .then_with(|| a.path.cmp(&b.path))
}

impl InstructionTrie {
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    /// The library this trie was built from, with `token_ids` filled in.
    pub fn library(&self) -> &InstructionLibrary {
        &self.library
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn terminal_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.terminal.is_some()).count()
    }

    pub fn cursor(&self) -> TrieCursor<'_> {
        TrieCursor {
            trie: self,
            node: ROOT,
            path: Vec::new(),
        }
    }

    /// Valid continuations after `prefix`, ascending.
    pub fn valid_next(&self, prefix: &[TokenId]) -> Result<Vec<TokenId>, TrieError> {
        let mut c = self.cursor();
        for &t in prefix {
            c.advance(t)?;
        }
        Ok(c.valid_next().collect())
    }

    fn checked_logits<S: TokenScorer + ?Sized>(
        &self,
        scorer: &mut S,
        prefix: &[TokenId],
    ) -> Result<Vec<f64>, TrieError> {
        let logits = scorer.score(prefix).map_err(TrieError::ScorerFailure)?;
        if logits.len() != self.vocab_size {
            return Err(TrieError::DimensionMismatch {
                expected: self.vocab_size,
                got: logits.len(),
            });
        }
        Ok(logits)
    }

    /// Greedy constrained walk from the root. Calls the scorer once per
    /// emitted token, `<EOS>` included.
    pub fn constrained_decode<S: TokenScorer + ?Sized>(&self, scorer: &mut S) -> Result<Decoded, TrieError> {
        let mut node = ROOT;
        let mut path = Vec::new();
        let mut score = 0.0;
        loop {
            if let Some(idx) = self.nodes[node].terminal {
                return Ok(Decoded {
                    instruction_id: self.library.instructions[idx].id.clone(),
                    tokens: path,
                    score,
                });
            }
            let logits = self.checked_logits(scorer, &path)?;
            let (tok, child, v) = pick_child(&self.nodes[node], &logits);
            score += v;
            path.push(tok);
            node = child;
        }
    }

    /// Top-`k` distinct instructions by path score, best first. Ties are
    /// broken by the token sequence, ascending.
    pub fn top_k_decode<S: TokenScorer + ?Sized>(&self, scorer: &mut S, k: usize) -> Result<Vec<Decoded>, TrieError> {
        self.top_k_decode_with_width(scorer, k, k.max(DEFAULT_BEAM_WIDTH))
    }

    /// Beam search with an explicit width (clamped to at least `k`).
    pub fn top_k_decode_with_width<S: TokenScorer + ?Sized>(
        &self,
        scorer: &mut S,
        k: usize,
        width: usize,
    ) -> Result<Vec<Decoded>, TrieError> {
        if k == 0 {
            return Err(TrieError::InvalidK);
        }
        if k > self.library.len() {
            return Err(TrieError::KTooLarge {
                k,
                size: self.library.len(),
            });
        }
        let width = width.max(k);
        let mut beams = vec![Hypothesis {
            node: ROOT,
            path: Vec::new(),
            score: 0.0,
        }];
        let mut finished = Vec::new();
        while !beams.is_empty() {
            let mut next = Vec::new();
            for h in beams {
                let logits = self.checked_logits(scorer, &h.path)?;
                for (&tok, &child) in &self.nodes[h.node].children {
                    let mut path = h.path.clone();
                    path.push(tok);
                    let ext = Hypothesis {
                        node: child,
                        path,
                        score: h.score + logits[tok as usize],
                    };
                    if self.nodes[child].terminal.is_some() {
                        finished.push(ext);
                    } else {
                        next.push(ext);
                    }
                }
            }
            next.sort_by(by_score_then_tokens);
            next.truncate(width);
            beams = next;
        }
        finished.sort_by(by_score_then_tokens);
        Ok(finished
            .into_iter()
            .take(k)
            .map(|h| Decoded {
                instruction_id: self.library.instructions[self.nodes[h.node].terminal.unwrap()]
                    .id
                    .clone(),
                tokens: h.path,
                score: h.score,
            })
            .collect())
    }

    /// Nested JSON view keyed by token string, for golden-file comparison.
    pub fn dump<T: Tokenizer + ?Sized>(&self, tokenizer: &T) -> Value {
        json!({
            "instructions": self.library.len(),
            "vocab_size": self.vocab_size,
            "root": self.dump_node(ROOT, tokenizer),
        })
    }

    fn dump_node<T: Tokenizer + ?Sized>(&self, idx: usize, tokenizer: &T) -> Value {
        let node = &self.nodes[idx];
        let mut obj = Map::new();
        if let Some(t) = node.terminal {
            obj.insert("instruction".into(), json!(self.library.instructions[t].id));
        }
        if !node.children.is_empty() {
            let children: Map<String, Value> = node
                .children
                .iter()
                .map(|(&tok, &child)| {
                    let name = tokenizer
                        .token(tok)
                        .map(str::to_string)
                        .unwrap_or_else(|| format!("#{tok}"));
                    (name, self.dump_node(child, tokenizer))
                })
                .collect();
            obj.insert("children".into(), Value::Object(children));
        }
        Value::Object(obj)
    }
}

/// Holder that publishes rebuilt tries atomically. Readers take a snapshot
/// and keep using it; they see the old trie or the new one, never a mix.
#[derive(Debug)]
pub struct SharedTrie {
    current: RwLock<Arc<InstructionTrie>>,
    rebuild_lock: Mutex<()>,
}

impl SharedTrie {
    pub fn new(trie: InstructionTrie) -> Self {
        Self {
            current: RwLock::new(Arc::new(trie)),
            rebuild_lock: Mutex::new(()),
        }
    }

    pub fn snapshot(&self) -> Arc<InstructionTrie> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Builds a trie for `library` off to the side and swaps it in. Returns
    /// the new generation.
    pub fn rebuild<T: Tokenizer + ?Sized>(
        &self,
        library: &InstructionLibrary,
        tokenizer: &T,
    ) -> Result<u64, TrieError> {
        let _writer = self.rebuild_lock.lock().unwrap_or_else(|e| e.into_inner());
        let fresh = Arc::new(build_trie(library, tokenizer)?);
        let generation = fresh.generation;
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = fresh;
        Ok(generation)
    }
}
