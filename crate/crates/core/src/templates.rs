//! Reasoning-template library.
//!
//! Templates are retrieved by cosine similarity between the embedded initial
//! reasoning and each template's embedding, gated by a threshold. Reasoning
//! that matches nothing is logged; logged traces can later be clustered and
//! summarized into candidate templates, which enter the library only through
//! the novelty gate in [`TemplateLibrary::add_if_novel`].

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::backend::{BackendError, BackendRequest, ModelBackend};
use crate::embedding::{cosine_similarity, fnv1a64, Embedder, EmbeddingError, EmbeddingVector};
use crate::prompts;
use crate::types::{ReasoningTrace, Trigger};

pub const DEFAULT_DELTA: f64 = 0.6;
pub const DEFAULT_NOVELTY_DELTA: f64 = 0.5;
/// Similarity at which two logged traces are linked into one cluster.
pub const CLUSTER_LINK_THRESHOLD: f64 = 0.7;
/// Similarities closer than this are treated as equal when ranking templates.
pub const SIMILARITY_TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("duplicate template id {0:?}")]
    DuplicateId(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("summarizer failed: {0}")]
    SummarizerFailure(#[from] BackendError),
    #[error("malformed template response: {0}")]
    MalformedTemplateResponse(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Serialized form of a template. Embeddings are never persisted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub scenarios: String,
    pub steps: Vec<String>,
}

impl TemplateSpec {
    /// Text that is embedded for this template: name, tags, scenarios and
    /// steps, one per line.
    pub fn embedding_text(&self) -> String {
        std::iter::once(self.name.as_str())
            .chain(self.tags.iter().map(String::as_str))
            .chain(std::iter::once(self.scenarios.as_str()))
            .chain(self.steps.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn validate(&self) -> Result<(), TemplateError> {
        if self.id.is_empty() {
            return Err(TemplateError::InvalidTemplate("empty id".into()));
        }
        if self.name.trim().is_empty() {
            return Err(TemplateError::InvalidTemplate(format!("{}: empty name", self.id)));
        }
        if self.steps.is_empty() {
            return Err(TemplateError::InvalidTemplate(format!("{}: no steps", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    spec: TemplateSpec,
    embedding: EmbeddingVector,
}

impl Template {
    pub fn new(spec: TemplateSpec, embedder: &dyn Embedder) -> Result<Self, TemplateError> {
        spec.validate()?;
        let embedding = embedder.embed(&spec.embedding_text())?;
        Ok(Self { spec, embedding })
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn spec(&self) -> &TemplateSpec {
        &self.spec
    }

    pub fn embedding(&self) -> &EmbeddingVector {
        &self.embedding
    }
}

/// Retrieval threshold and insertion novelty threshold, both in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub delta: f64,
    pub novelty_delta: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            novelty_delta: DEFAULT_NOVELTY_DELTA,
        }
    }
}

impl RetrievalConfig {
    pub fn new(delta: f64, novelty_delta: f64) -> Result<Self, TemplateError> {
        let cfg = Self { delta, novelty_delta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for (name, v) in [("delta", self.delta), ("novelty_delta", self.novelty_delta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(TemplateError::InvalidConfig(format!("{name} = {v} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// Same config with a different retrieval threshold. Sweeps use this to
    /// probe the closed endpoints 0 and 1, which `new` rejects.
    pub fn with_sweep_delta(self, delta: f64) -> Self {
        Self { delta, ..self }
    }
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn null_as_neg_infinity<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
}

/// A reasoning trace that no template matched. `best_similarity` is `-inf`
/// (serialized as `null`) when the library was empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationLogEntry {
    pub trigger_id: String,
    pub reasoning: ReasoningTrace,
    #[serde(serialize_with = "finite_or_null", deserialize_with = "null_as_neg_infinity")]
    pub best_similarity: f64,
    pub delta: f64,
    /// Monotonic sequence number within the process.
    pub seq: u64,
    pub logged_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Insertion {
    Added,
    Rejected(f64),
}

/// One decision of the novelty gate.
#[derive(Debug, Clone, PartialEq)]
pub struct InsertionAudit {
    pub template_id: String,
    /// Maximum similarity against the library as it stood; `-inf` if empty.
    pub max_prior_similarity: f64,
    pub novelty_delta: f64,
    pub verdict: Insertion,
}

#[derive(Debug, Clone, Copy)]
pub struct Retrieval<'a> {
    pub template: &'a Template,
    pub similarity: f64,
}

pub struct TemplateLibrary {
    embedder: Arc<dyn Embedder>,
    templates: Vec<Template>,
    log: Mutex<Vec<DistillationLogEntry>>,
    audit: Vec<InsertionAudit>,
    seq: AtomicU64,
}

impl std::fmt::Debug for TemplateLibrary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TemplateLibrary")
            .field("templates", &self.templates.len())
            .finish_non_exhaustive()
    }
}

impl TemplateLibrary {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            embedder,
            templates: Vec::new(),
            log: Mutex::new(Vec::new()),
            audit: Vec::new(),
            seq: AtomicU64::new(0),
        }
    }

    /// Loads seed templates without novelty gating. Ids must be unique.
    pub fn with_templates(embedder: Arc<dyn Embedder>, specs: Vec<TemplateSpec>) -> Result<Self, TemplateError> {
        let mut lib = Self::new(embedder);
        for spec in specs {
            if lib.get(&spec.id).is_some() {
                return Err(TemplateError::DuplicateId(spec.id));
            }
            let t = Template::new(spec, lib.embedder.as_ref())?;
            lib.templates.push(t);
        }
        Ok(lib)
    }

    /// Parses a JSON array of `{id, name, tags, scenarios, steps}`.
    pub fn from_json(embedder: Arc<dyn Embedder>, json: &str) -> Result<Self, TemplateError> {
        Self::with_templates(embedder, serde_json::from_str(json)?)
    }

    pub fn to_json(&self) -> String {
        let specs: Vec<&TemplateSpec> = self.templates.iter().map(|t| &t.spec).collect();
        serde_json::to_string_pretty(&specs).expect("templates serialize")
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Option<&Template> {
        self.templates.iter().find(|t| t.id() == id)
    }

    /// Highest-similarity template for `embedding`, ties to the smallest id.
    /// Similarities within [`SIMILARITY_TIE_EPSILON`] count as tied, so equal
    /// cosines summed in different orders still resolve by id.
    fn best_match(&self, embedding: &EmbeddingVector) -> Result<Option<(usize, f64)>, TemplateError> {
        let mut best: Option<(usize, f64)> = None;
        for (i, t) in self.templates.iter().enumerate() {
            let s = cosine_similarity(embedding, &t.embedding)?;
            best = match best {
                Some((j, b))
                    if s < b - SIMILARITY_TIE_EPSILON
                        || ((s - b).abs() <= SIMILARITY_TIE_EPSILON && self.templates[j].id() <= t.id()) =>
                {
                    Some((j, b))
                }
                _ => Some((i, s)),
            };
        }
        Ok(best)
    }

    /// Returns the best template when its similarity reaches `cfg.delta`.
    /// Misses are appended to the distillation log.
    pub fn retrieve(
        &self,
        trigger_id: &str,
        reasoning: &ReasoningTrace,
        cfg: &RetrievalConfig,
    ) -> Result<Option<Retrieval<'_>>, TemplateError> {
        let query = self.embedder.embed(&reasoning.content_text())?;
        let best = self.best_match(&query)?;
        if let Some((i, s)) = best {
            if s >= cfg.delta {
                return Ok(Some(Retrieval {
                    template: &self.templates[i],
                    similarity: s,
                }));
            }
        }
        let best_similarity = best.map_or(f64::NEG_INFINITY, |(_, s)| s);
        self.push_log(trigger_id, reasoning, best_similarity, cfg.delta);
        Ok(None)
    }

    fn push_log(&self, trigger_id: &str, reasoning: &ReasoningTrace, best_similarity: f64, delta: f64) {
        let logged_at_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let entry = DistillationLogEntry {
            trigger_id: trigger_id.to_string(),
            reasoning: reasoning.clone(),
            best_similarity,
            delta,
            seq: self.seq.fetch_add(1, Ordering::SeqCst),
            logged_at_ms,
        };
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(entry);
    }

    pub fn distillation_log(&self) -> Vec<DistillationLogEntry> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Removes and returns the pending log entries.
    pub fn take_distillation_log(&self) -> Vec<DistillationLogEntry> {
        std::mem::take(&mut *self.log.lock().unwrap_or_else(|e| e.into_inner()))
    }

    /// Inserts `candidate` only when its maximum similarity to every current
    /// template is below `cfg.novelty_delta`.
    pub fn add_if_novel(&mut self, candidate: TemplateSpec, cfg: &RetrievalConfig) -> Result<Insertion, TemplateError> {
        if self.get(&candidate.id).is_some() {
            return Err(TemplateError::DuplicateId(candidate.id));
        }
        let t = Template::new(candidate, self.embedder.as_ref())?;
        let max_prior = self.best_match(&t.embedding)?.map_or(f64::NEG_INFINITY, |(_, s)| s);
        let verdict = if max_prior < cfg.novelty_delta {
            Insertion::Added
        } else {
            Insertion::Rejected(max_prior)
        };
        self.audit.push(InsertionAudit {
            template_id: t.id().to_string(),
            max_prior_similarity: max_prior,
            novelty_delta: cfg.novelty_delta,
            verdict,
        });
        if verdict == Insertion::Added {
            self.templates.push(t);
        }
        Ok(verdict)
    }

    pub fn audit_log(&self) -> &[InsertionAudit] {
        &self.audit
    }
}

pub fn append_log_jsonl(path: &Path, entries: &[DistillationLogEntry]) -> Result<(), TemplateError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}

pub fn read_log_jsonl(path: &Path) -> Result<Vec<DistillationLogEntry>, TemplateError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// A cluster whose summary could not be turned into a template.
#[derive(Debug)]
pub struct ClusterFailure {
    pub cluster: usize,
    pub medoid_trigger: String,
    pub error: TemplateError,
}

#[derive(Debug, Default)]
pub struct DistillOutcome {
    pub candidates: Vec<TemplateSpec>,
    pub failures: Vec<ClusterFailure>,
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller index becomes the root so cluster order is stable
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Pairwise similarities between log entries, indexed like the log.
pub type SimilarityMatrix = Vec<Vec<f64>>;

/// Single-linkage clusters (connected components of the graph linking pairs
/// with similarity >= [`CLUSTER_LINK_THRESHOLD`]), each listed in log order
/// and ordered by first member.
pub fn cluster_entries(
    log: &[DistillationLogEntry],
    embedder: &dyn Embedder,
) -> Result<(Vec<Vec<usize>>, SimilarityMatrix), TemplateError> {
    let embeddings = log
        .iter()
        .map(|e| embedder.embed(&e.reasoning.content_text()))
        .collect::<Result<Vec<_>, _>>()?;
    let n = log.len();
    let mut sims = vec![vec![0.0; n]; n];
    let mut sets = DisjointSet((0..n).collect());
    for i in 0..n {
        sims[i][i] = 1.0;
        for j in i + 1..n {
            let s = cosine_similarity(&embeddings[i], &embeddings[j])?;
            sims[i][j] = s;
            sims[j][i] = s;
            if s >= CLUSTER_LINK_THRESHOLD {
                sets.union(i, j);
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut root_slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = sets.find(i);
        if root_slot[r] == usize::MAX {
            root_slot[r] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[root_slot[r]].push(i);
    }
    Ok((clusters, sims))
}

/// Member with the largest total similarity to the rest of its cluster.
fn medoid(members: &[usize], sims: &[Vec<f64>]) -> usize {
    let mut best = (members[0], f64::NEG_INFINITY);
    for &m in members {
        let total: f64 = members.iter().map(|&o| sims[m][o]).sum();
        if total > best.1 {
            best = (m, total);
        }
    }
    best.0
}

#[derive(Deserialize)]
struct SummaryResponse {
    name: String,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    scenarios: String,
    steps: Vec<String>,
}

fn parse_summary(text: &str) -> Result<TemplateSpec, TemplateError> {
    let start = text.find('{');
    let end = text.rfind('}');
    let body = match (start, end) {
        (Some(s), Some(e)) if s < e => &text[s..=e],
        _ => return Err(TemplateError::MalformedTemplateResponse("no JSON object".into())),
    };
    let r: SummaryResponse =
        serde_json::from_str(body).map_err(|e| TemplateError::MalformedTemplateResponse(e.to_string()))?;
    let digest = fnv1a64(format!("{}\n{}", r.name, r.steps.join("\n")).as_bytes());
    let spec = TemplateSpec {
        id: format!("distilled-{digest:016x}"),
        name: r.name,
        tags: r.tags,
        scenarios: r.scenarios,
        steps: r.steps,
    };
    spec.validate()
        .map_err(|e| TemplateError::MalformedTemplateResponse(e.to_string()))?;
    Ok(spec)
}

/// Clusters logged traces, sends each large-enough cluster's medoid to the
/// summarizer and parses the reply into a candidate template. Candidates are
/// returned, not inserted.
pub fn distill_candidates(
    log: &[DistillationLogEntry],
    summarizer: &dyn ModelBackend,
    embedder: &dyn Embedder,
    min_cluster: usize,
) -> Result<DistillOutcome, TemplateError> {
    if min_cluster == 0 {
        return Err(TemplateError::InvalidConfig("min_cluster must be at least 1".into()));
    }
    let (clusters, sims) = cluster_entries(log, embedder)?;
    let mut outcome = DistillOutcome::default();
    for (ci, members) in clusters.iter().enumerate() {
        if members.len() < min_cluster {
            continue;
        }
        let m = &log[medoid(members, &sims)];
        let trigger = Trigger::text(m.trigger_id.clone(), m.reasoning.content_text())
            .map_err(|e| TemplateError::InvalidTemplate(e.to_string()))?;
        let req = BackendRequest::generate(prompts::distill(&m.reasoning, members.len()), trigger);
        let result = summarizer
            .generate_text(&req)
            .map_err(TemplateError::from)
            .and_then(|text| parse_summary(&text));
        match result {
            Ok(spec) => outcome.candidates.push(spec),
            Err(error) => outcome.failures.push(ClusterFailure {
                cluster: ci,
                medoid_trigger: m.trigger_id.clone(),
                error,
            }),
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockScript};
    use crate::embedding::HashedBagOfWords;

    fn embedder() -> Arc<dyn Embedder> {
        Arc::new(HashedBagOfWords::default())
    }

    fn spec(id: &str, name: &str, tags: &[&str], scenarios: &str, steps: &[&str]) -> TemplateSpec {
        TemplateSpec {
            id: id.into(),
            name: name.into(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            scenarios: scenarios.into(),
            steps: steps.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn fixture() -> TemplateLibrary {
        TemplateLibrary::with_templates(
            embedder(),
            vec![
                spec(
                    "hotel",
                    "Hotel Reservation Information Extraction",
                    &["travel", "reservation", "hotel"],
                    "booking confirmations for hotel stays",
                    &["Extract hotel name", "Identify check-in date", "Identify check-out date", "Recommend calendar reminder"],
                ),
                spec(
                    "contact",
                    "Contact Detail Capture",
                    &["contact", "phone"],
                    "messages that carry a phone number or email",
                    &["Extract phone number", "Identify the person", "Recommend saving contact"],
                ),
                spec(
                    "transit",
                    "Train Ticket Navigation",
                    &["travel", "train"],
                    "tickets for rail journeys",
                    &["Extract departure station", "Identify departure time", "Recommend navigation to station"],
                ),
            ],
        )
        .unwrap()
    }

    fn free(text: &str) -> ReasoningTrace {
        ReasoningTrace::parse(&format!("<REASONING>{text}</REASONING>")).unwrap()
    }

    #[test]
    fn embedding_text_joins_fields() {
        let s = spec("x", "N", &["a", "b"], "sc", &["s1", "s2"]);
        assert_eq!(s.embedding_text(), "N\na\nb\nsc\ns1\ns2");
    }

    #[test]
    fn invalid_templates_and_configs() {
        assert!(Template::new(spec("x", " ", &[], "", &["s"]), &HashedBagOfWords::default()).is_err());
        assert!(Template::new(spec("x", "n", &[], "", &[]), &HashedBagOfWords::default()).is_err());
        assert!(RetrievalConfig::new(0.0, 0.5).is_err());
        assert!(RetrievalConfig::new(0.6, 1.0).is_err());
        assert!(RetrievalConfig::new(0.6, 0.5).is_ok());
        let dup = vec![spec("a", "n", &[], "", &["s"]), spec("a", "m", &[], "", &["t"])];
        assert!(matches!(TemplateLibrary::with_templates(embedder(), dup), Err(TemplateError::DuplicateId(_))));
    }

    #[test]
    fn empty_library_logs_with_sentinel() {
        let lib = TemplateLibrary::new(embedder());
        let got = lib.retrieve("t1", &free("hotel"), &RetrievalConfig::default()).unwrap();
        assert!(got.is_none());
        let log = lib.distillation_log();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].best_similarity, f64::NEG_INFINITY);
        let line = serde_json::to_string(&log[0]).unwrap();
        assert!(line.contains("\"best_similarity\":null"));
        let back: DistillationLogEntry = serde_json::from_str(&line).unwrap();
        assert_eq!(back, log[0]);
    }

    #[test]
    fn self_match_retrieves_with_similarity_one() {
        let lib = fixture();
        let text = lib.get("contact").unwrap().spec().embedding_text();
        let r = lib.retrieve("t", &free(&text), &RetrievalConfig::default()).unwrap().unwrap();
        assert_eq!(r.template.id(), "contact");
        assert_eq!(r.similarity, 1.0);
        assert!(lib.distillation_log().is_empty());
    }

    #[test]
    fn fixture_retrieval_matches_precomputed_scan() {
        // Similarities from an independent bag-of-words implementation:
        // hotel 0.6782329983125268, contact 0.08846517369293828, transit 0.15396007178390023;
        // "ticket to the station": hotel 0.07372097807744857, contact 0.14744195615489714, transit 0.3849001794597505
        let lib = fixture();
        let q = free("Extract hotel name Grand Plaza\nIdentify check-in date May 3\nIdentify check-out date May 5\nhotel reservation");
        let r = lib.retrieve("t", &q, &RetrievalConfig::default()).unwrap().unwrap();
        assert_eq!(r.template.id(), "hotel");
        assert!((r.similarity - 0.6782329983125268).abs() < 1e-12);
        // a train query stays below 0.6 everywhere: miss, logged with the best score
        let q = free("ticket to the station");
        assert!(lib.retrieve("t2", &q, &RetrievalConfig::default()).unwrap().is_none());
        let log = lib.distillation_log();
        assert_eq!(log.len(), 1);
        assert!((log[0].best_similarity - 0.3849001794597505).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let lib = TemplateLibrary::with_templates(
            embedder(),
            vec![spec("b", "same words", &[], "", &["here"]), spec("a", "same words", &[], "", &["here"])],
        )
        .unwrap();
        let r = lib.retrieve("t", &free("same words here"), &RetrievalConfig::default()).unwrap().unwrap();
        assert_eq!(r.template.id(), "a");
    }

    #[test]
    fn novelty_gate() {
        let cfg = RetrievalConfig::default();
        let mut lib = TemplateLibrary::new(embedder());
        let base = spec("base", "alpha bravo charlie", &[], "delta echo", &["foxtrot golf hotel india juliet"]);
        assert_eq!(lib.add_if_novel(base.clone(), &cfg).unwrap(), Insertion::Added);
        assert_eq!(lib.audit_log()[0].max_prior_similarity, f64::NEG_INFINITY);

        let again = TemplateSpec { id: "again".into(), ..base.clone() };
        assert_eq!(lib.add_if_novel(again, &cfg).unwrap(), Insertion::Rejected(1.0));
        assert_eq!(lib.len(), 1);

        // 3 shared words out of 10 distinct on each side: 3 / 10
        let cand = spec("cand", "alpha bravo charlie", &[], "kilo lima", &["mike november oscar papa romeo"]);
        assert_eq!(lib.add_if_novel(cand, &cfg).unwrap(), Insertion::Added);
        assert!((lib.audit_log()[2].max_prior_similarity - 0.3).abs() < 1e-12);
        assert_eq!(lib.len(), 2);

        assert!(matches!(lib.add_if_novel(base, &cfg), Err(TemplateError::DuplicateId(_))));
    }

    #[test]
    fn retrieval_does_not_mutate_templates() {
        let lib = fixture();
        let before = lib.to_json();
        for q in ["hotel", "train station", "phone number"] {
            lib.retrieve("t", &free(q), &RetrievalConfig::default()).unwrap();
        }
        assert_eq!(lib.to_json(), before);
    }

    #[test]
    fn json_round_trip() {
        let lib = fixture();
        let again = TemplateLibrary::from_json(embedder(), &lib.to_json()).unwrap();
        assert_eq!(again.templates(), lib.templates());
    }

    fn entry(id: &str, text: &str) -> DistillationLogEntry {
        DistillationLogEntry {
            trigger_id: id.into(),
            reasoning: free(text),
            best_similarity: 0.1,
            delta: 0.6,
            seq: 0,
            logged_at_ms: 0,
        }
    }

    const SUMMARY: &str = r#"Here you go: {"name": "Parcel Pickup", "tags": ["delivery"], "scenarios": "courier notices", "steps": ["Extract pickup code", "Recommend navigation to locker"]}"#;

    #[test]
    fn distill_empty_log() {
        let mock = MockBackend::new(MockScript::new());
        let out = distill_candidates(&[], &mock, &HashedBagOfWords::default(), 1).unwrap();
        assert!(out.candidates.is_empty() && out.failures.is_empty());
        assert!(distill_candidates(&[], &mock, &HashedBagOfWords::default(), 0).is_err());
    }

    #[test]
    fn distill_identical_traces_form_one_cluster() {
        let mock = MockBackend::new(MockScript::new().text("parcel", SUMMARY));
        let log: Vec<_> = (0..3).map(|i| entry(&format!("t{i}"), "parcel locker pickup code 4411")).collect();
        let out = distill_candidates(&log, &mock, &HashedBagOfWords::default(), 2).unwrap();
        assert!(out.failures.is_empty());
        assert_eq!(out.candidates.len(), 1);
        let c = &out.candidates[0];
        assert_eq!(c.name, "Parcel Pickup");
        assert_eq!(c.steps, vec!["Extract pickup code", "Recommend navigation to locker"]);
        assert!(c.id.starts_with("distilled-"));
        assert_eq!(mock.transcript().len(), 1);
        assert!(mock.transcript()[0].1.contains("3 logged cases"));
    }

    #[test]
    fn distill_orthogonal_traces_stay_apart() {
        let e = HashedBagOfWords::default();
        assert_ne!(e.bucket("alpha"), e.bucket("beta"));
        let mock = MockBackend::new(MockScript::new().text("", SUMMARY));
        let log = vec![entry("a", "alpha"), entry("b", "beta")];
        let out = distill_candidates(&log, &mock, &e, 2).unwrap();
        assert!(out.candidates.is_empty());
        assert!(mock.transcript().is_empty());
    }

    #[test]
    fn distill_reports_per_cluster_failures() {
        let mock = MockBackend::new(MockScript::new().text("alpha", "not json").text("beta", SUMMARY));
        let log = vec![entry("a", "alpha"), entry("b", "beta"), entry("c", "gamma")];
        let out = distill_candidates(&log, &mock, &HashedBagOfWords::default(), 1).unwrap();
        assert_eq!(out.candidates.len(), 1);
        assert_eq!(out.failures.len(), 2);
        assert!(matches!(out.failures[0].error, TemplateError::MalformedTemplateResponse(_)));
        assert!(matches!(out.failures[1].error, TemplateError::SummarizerFailure(BackendError::NoScriptMatch)));
    }

    #[test]
    fn medoid_is_most_central() {
        let log = vec![
            entry("edge", "parcel locker pickup code 4411 tomorrow morning"),
            entry("mid", "parcel locker pickup code 4411 tomorrow"),
            entry("other", "parcel locker pickup code 4411"),
        ];
        let (clusters, sims) = cluster_entries(&log, &HashedBagOfWords::default()).unwrap();
        assert_eq!(clusters, vec![vec![0, 1, 2]]);
        assert_eq!(medoid(&clusters[0], &sims), 1);
    }

    #[test]
    fn log_jsonl_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        append_log_jsonl(&path, &[entry("a", "x")]).unwrap();
        append_log_jsonl(&path, &[entry("b", "y")]).unwrap();
        let back = read_log_jsonl(&path).unwrap();
        assert_eq!(back.iter().map(|e| e.trigger_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    }
}
