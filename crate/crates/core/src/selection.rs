//! In-context example selection over labeled pools.
//!
//! Random selection is a partial Fisher–Yates shuffle driven by ChaCha8
//! (`rand_chacha::ChaCha8Rng::seed_from_u64`), with bounded draws done by
//! rejection sampling on `next_u64`, so a seed reproduces the same draw on
//! every platform. Semantic selection is an exact linear cosine scan.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, Embedder};
use crate::model::{ExampleKind, LabeledExample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("example pool is empty")]
    EmptyPool,

    #[error("requested {k} examples from a pool of {size}")]
    NotEnoughExamples { k: usize, size: usize },

    #[error("example `{id}` has kind {found}, pool holds {expected}")]
    KindMismatch {
        id: String,
        expected: ExampleKind,
        found: ExampleKind,
    },

    #[error("duplicate example id `{0}`")]
    DuplicateId(String),

    #[error("pool has no embedding index")]
    MissingIndex,

    #[error("index has {vectors} vectors for {examples} examples")]
    IndexSize { vectors: usize, examples: usize },

    #[error("vector dimension {found} does not match {expected}")]
    Dimension { expected: usize, found: usize },

    #[error("embedding example `{id}` failed: {source}")]
    Embedding { id: String, source: BackendError },

    #[error("embedding query failed: {0}")]
    QueryEmbedding(BackendError),
}

/// The text that gets embedded for both pool entries and live queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionQuery {
    pub age: u32,
    pub sex: String,
    pub text: String,
}

impl SelectionQuery {
    pub fn new(age: u32, sex: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            age,
            sex: sex.into(),
            text: text.into(),
        }
    }

    pub fn for_example(ex: &LabeledExample) -> Self {
        Self::new(ex.age, ex.sex.clone(), ex.input_text.clone())
    }

    pub fn render(&self) -> String {
        format!("age: {}; sex: {}; {}", self.age, self.sex, self.text)
    }
}

/// Labeled examples of one kind, optionally with one embedding per example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExamplePool {
    kind: ExampleKind,
    examples: Vec<LabeledExample>,
    index: Option<Vec<Vec<f64>>>,
}

impl ExamplePool {
    pub fn new(kind: ExampleKind, examples: Vec<LabeledExample>) -> Result<Self, SelectionError> {
        let mut ids = HashSet::new();
        for ex in &examples {
            if ex.kind != kind {
                return Err(SelectionError::KindMismatch {
                    id: ex.id.clone(),
                    expected: kind,
                    found: ex.kind,
                });
            }
            if !ids.insert(ex.id.as_str()) {
                return Err(SelectionError::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Self {
            kind,
            examples,
            index: None,
        })
    }

    /// Attaches precomputed vectors, one per example in pool order.
    pub fn with_index(mut self, vectors: Vec<Vec<f64>>) -> Result<Self, SelectionError> {
        if vectors.len() != self.examples.len() {
            return Err(SelectionError::IndexSize {
                vectors: vectors.len(),
                examples: self.examples.len(),
            });
        }
        if let Some(first) = vectors.first() {
            let dim = first.len();
            if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
                return Err(SelectionError::Dimension {
                    expected: dim,
                    found: bad.len(),
                });
            }
        }
        self.index = Some(vectors);
        Ok(self)
    }

    pub fn kind(&self) -> ExampleKind {
        self.kind
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn index(&self) -> Option<&[Vec<f64>]> {
        self.index.as_deref()
    }
}

/// Embeds every example through its own [`SelectionQuery`] rendering.
pub fn build_index(pool: ExamplePool, embedder: &dyn Embedder) -> Result<ExamplePool, SelectionError> {
    if pool.is_empty() {
        return Err(SelectionError::EmptyPool);
    }
    let vectors = pool
        .examples
        .iter()
        .map(|ex| {
            embedder
                .embed(&SelectionQuery::for_example(ex).render())
                .map_err(|source| SelectionError::Embedding {
                    id: ex.id.clone(),
                    source,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    pool.with_index(vectors)
}

/// `k` distinct examples drawn uniformly without replacement, in draw order.
pub fn select_random(pool: &ExamplePool, k: usize, seed: u64) -> Result<Vec<&LabeledExample>, SelectionError> {
    let n = pool.len();
    if k > n {
        return Err(SelectionError::NotEnoughExamples { k, size: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + uniform_below(&mut rng, (n - i) as u64) as usize;
        order.swap(i, j);
    }
    Ok(order[..k].iter().map(|&i| &pool.examples[i]).collect())
}

fn uniform_below(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    debug_assert!(n > 0);
    let zone = u64::MAX - (u64::MAX % n + 1) % n;
    loop {
        let x = rng.next_u64();
        if x <= zone {
            return x % n;
        }
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Top-`k` pool examples by cosine similarity to `query`, descending, ties
/// broken by ascending example id.
pub fn select_by_vector<'a>(
    pool: &'a ExamplePool,
    query: &[f64],
    k: usize,
) -> Result<Vec<(&'a LabeledExample, f64)>, SelectionError> {
    let index = pool.index().ok_or(SelectionError::MissingIndex)?;
    if k > pool.len() {
        return Err(SelectionError::NotEnoughExamples { k, size: pool.len() });
    }
    if let Some(v) = index.first() {
        if v.len() != query.len() {
            return Err(SelectionError::Dimension {
                expected: v.len(),
                found: query.len(),
            });
        }
    }
    let mut scored: Vec<_> = pool
        .examples
        .iter()
        .zip(index)
        .map(|(ex, v)| (ex, cosine_similarity(query, v)))
        .collect();
    scored.sort_by(|(ea, sa), (eb, sb)| match sb.total_cmp(sa) {
        Ordering::Equal => ea.id.cmp(&eb.id),
        o => o,
    });
    scored.truncate(k);
    Ok(scored)
}

pub fn select_semantic<'a>(
    pool: &'a ExamplePool,
    query: &SelectionQuery,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<&'a LabeledExample>, SelectionError> {
    if pool.index().is_none() {
        return Err(SelectionError::MissingIndex);
    }
    if k > pool.len() {
        return Err(SelectionError::NotEnoughExamples { k, size: pool.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let qv = embedder
        .embed(&query.render())
        .map_err(SelectionError::QueryEmbedding)?;
    Ok(select_by_vector(pool, &qv, k)?.into_iter().map(|(ex, _)| ex).collect())
}

/// First 8 bytes of SHA-256, big-endian.
pub fn stable_hash64(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
