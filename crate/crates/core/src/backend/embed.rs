use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::BackendError;

/// Maps text to a fixed-dimension vector.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

/// Deterministic offline embedder: a pseudo-random unit vector seeded by the
/// SHA-256 of the text. Carries no semantics; equal texts map to equal vectors.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(64)
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyText);
        }
        let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        // Box-Muller normals give a direction uniform on the sphere.
        let mut v = Vec::with_capacity(self.dimension);
        while v.len() < self.dimension {
            let u1 = open_unit(&mut rng);
            let u2 = open_unit(&mut rng);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = std::f64::consts::TAU * u2;
            v.push(r * theta.cos());
            if v.len() < self.dimension {
                v.push(r * theta.sin());
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}

/// Uniform sample in (0, 1].
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64
}
