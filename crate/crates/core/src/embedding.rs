//! Text embeddings and cosine similarity.
//!
//! [`HashedBagOfWords`] is the reference embedder: lowercase, split on
//! whitespace, hash every word with 64-bit FNV-1a into one of `d` buckets,
//! count, then L2-normalize.

use thiserror::Error;

pub const DEFAULT_DIMENSION: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("empty text")]
    EmptyText,
    #[error("text has no words to embed")]
    DegenerateEmbedding,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("non-finite embedding value")]
    NonFinite,
    #[error("embedding backend failed: {0}")]
    Backend(String),
}

/// A real vector with its Euclidean norm cached.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Self { values, norm })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, c: f64) -> Result<Self, EmbeddingError> {
        Self::new(self.values.iter().map(|v| v * c).collect())
    }
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dimension() != b.dimension() {
        return Err(EmbeddingError::DimensionMismatch(a.dimension(), b.dimension()));
    }
    if a.norm == 0.0 || b.norm == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm * b.norm)).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagOfWords {
    dimension: usize,
}

impl HashedBagOfWords {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn bucket(&self, word: &str) -> usize {
        (fnv1a64(word.to_lowercase().as_bytes()) % self.dimension as u64) as usize
    }
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

impl Embedder for HashedBagOfWords {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let mut counts = vec![0.0; self.dimension];
        for w in text.split_whitespace() {
            counts[self.bucket(w)] += 1.0;
        }
        let norm = counts.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbeddingError::DegenerateEmbedding);
        }
        EmbeddingVector::new(counts.into_iter().map(|c| c / norm).collect())
    }
}
