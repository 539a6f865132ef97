//! Metric suite and the retrieval-threshold sweep.
//!
//! Precision, recall and F1 treat the top-1 prediction as a single-label
//! classification over instruction classes and macro-average over the classes
//! that occur among the golds. A class never predicted has precision 0.
//! A sample with no prediction counts as a miss for its gold class.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::Engine;
use crate::templates::RetrievalConfig;
use crate::trie::InstructionLibrary;
use crate::types::Trigger;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {golds} golds")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("unknown instruction id {0:?}")]
    UnknownInstructionId(String),
    #[error("k must be positive")]
    InvalidK,
    #[error("no samples")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub trigger: Trigger,
    pub gold: String,
}

/// Reads `{"trigger": {...}, "gold": "<instruction id>"}` lines. Blank lines
/// are skipped; every gold must be a library instruction.
pub fn load_testset(path: &Path, library: &InstructionLibrary) -> Result<Vec<EvalSample>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    parse_testset(&text, library)
}

pub fn parse_testset(text: &str, library: &InstructionLibrary) -> Result<Vec<EvalSample>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: EvalSample = serde_json::from_str(line).map_err(|e| EvalError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !library.contains(&s.gold) {
            return Err(EvalError::UnknownInstructionId(s.gold));
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub samples: usize,
    pub recall: f64,
    pub precision: f64,
    pub macro_f1: f64,
    pub hit_rate: BTreeMap<usize, f64>,
    pub per_class: BTreeMap<String, ClassScores>,
}

impl Metrics {
    pub fn hr(&self, k: usize) -> Option<f64> {
        self.hit_rate.get(&k).copied()
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics<S: AsRef<str>>(
    predictions: &[Vec<S>],
    golds: &[S],
    k_values: &[usize],
    library: &InstructionLibrary,
) -> Result<Metrics, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if golds.is_empty() {
        return Err(EvalError::Empty);
    }
    if k_values.contains(&0) {
        return Err(EvalError::InvalidK);
    }
    for id in golds.iter().chain(predictions.iter().flatten()) {
        if !library.contains(id.as_ref()) {
            return Err(EvalError::UnknownInstructionId(id.as_ref().to_string()));
        }
    }

    let mut tp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut predicted: BTreeMap<&str, usize> = BTreeMap::new();
    let mut actual: BTreeMap<&str, usize> = BTreeMap::new();
    for (pred, gold) in predictions.iter().zip(golds) {
        let gold = gold.as_ref();
        *actual.entry(gold).or_default() += 1;
        if let Some(top) = pred.first() {
            let top = top.as_ref();
            *predicted.entry(top).or_default() += 1;
            if top == gold {
                *tp.entry(gold).or_default() += 1;
            }
        }
    }

    let mut per_class = BTreeMap::new();
    for (&class, &n) in &actual {
        let t = tp.get(class).copied().unwrap_or(0);
        let precision = ratio(t, predicted.get(class).copied().unwrap_or(0));
        let recall = ratio(t, n);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.insert(class.to_string(), ClassScores { precision, recall, f1 });
    }
    let classes = per_class.len() as f64;
    let mean = |f: fn(&ClassScores) -> f64| per_class.values().map(f).sum::<f64>() / classes;

    let hit_rate = k_values
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|&k| {
            let hits = predictions
                .iter()
                .zip(golds)
                .filter(|(p, g)| p.iter().take(k).any(|x| x.as_ref() == g.as_ref()))
                .count();
            (k, ratio(hits, golds.len()))
        })
        .collect();

    Ok(Metrics {
        samples: golds.len(),
        recall: mean(|c| c.recall),
        precision: mean(|c| c.precision),
        macro_f1: mean(|c| c.f1),
        hit_rate,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleFailure {
    pub sample_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub delta: f64,
    pub metrics: Metrics,
    /// True when at least one sample failed and was scored as a miss.
    pub partial: bool,
    pub failures: Vec<SampleFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str = "delta,recall,precision,macro_f1,hr1,hr3";

impl SweepTable {
    pub fn is_partial(&self) -> bool {
        self.rows.iter().any(|r| r.partial)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.delta,
                m.recall,
                m.precision,
                m.macro_f1,
                m.hr(1).unwrap_or(0.0),
                m.hr(3).unwrap_or(0.0)
            ));
        }
        out
    }
}

/// Runs every sample through `engine` once and scores the predictions.
/// Failed samples are recorded and scored as empty predictions.
pub fn evaluate(
    engine: &Engine,
    testset: &[EvalSample],
    cfg: &RetrievalConfig,
    k: usize,
) -> Result<SweepRow, EvalError> {
    let outcomes: Vec<Result<Vec<String>, String>> = testset
        .par_iter()
        .map(|s| {
            engine
                .infer(&s.trigger, cfg, k)
                .map(|r| r.instructions)
                .map_err(|e| e.to_string())
        })
        .collect();
    let mut predictions = Vec::with_capacity(testset.len());
    let mut failures = Vec::new();
    for (s, o) in testset.iter().zip(outcomes) {
        match o {
            Ok(p) => predictions.push(p),
            Err(error) => {
                failures.push(SampleFailure {
                    sample_id: s.trigger.id().to_string(),
                    error,
                });
                predictions.push(Vec::new());
            }
        }
    }
    let golds: Vec<String> = testset.iter().map(|s| s.gold.clone()).collect();
    let library = engine.trie();
    let metrics = compute_metrics(&predictions, &golds, &[1, 3], library.library())?;
    Ok(SweepRow {
        delta: cfg.delta,
        metrics,
        partial: !failures.is_empty(),
        failures,
    })
}

/// One [`evaluate`] pass per threshold, in the given order.
pub fn delta_sweep(
    engine: &Engine,
    testset: &[EvalSample],
    deltas: &[f64],
    k: usize,
    base: &RetrievalConfig,
) -> Result<SweepTable, EvalError> {
    let rows = deltas
        .iter()
        .map(|&d| evaluate(engine, testset, &base.with_sweep_delta(d), k))
        .collect::<Result<_, _>>()?;
    Ok(SweepTable { rows })
}
