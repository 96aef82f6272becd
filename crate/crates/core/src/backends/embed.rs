//! Offline embedders.

use super::{BackendError, Embedder};
use crate::dataset::ClassLabel;
use crate::extraction::mentioned_labels;

/// Check that a batch shares one dimension and scale every vector to unit length.
pub fn normalize_batch(mut vectors: Vec<Vec<f32>>) -> Result<Vec<Vec<f32>>, BackendError> {
    let dim = vectors.first().map_or(0, Vec::len);
    for v in &mut vectors {
        if v.len() != dim {
            return Err(BackendError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x = (f64::from(*x) / norm) as f32);
        }
    }
    Ok(vectors)
}

/// Bag-of-words feature hashing. Class names (and their plurals) own the
/// first 16 dimensions; every other word hashes into the rest.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    name: String,
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim: dim.max(ClassLabel::COUNT + 1),
        }
    }

    fn bucket(&self, word: &str) -> usize {
        if let Some(c) = ClassLabel::ALL.iter().find(|c| c.name() == word) {
            return c.index();
        }
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in word.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        let free = (self.dim - ClassLabel::COUNT) as u64;
        ClassLabel::COUNT + (crate::rng::mix64(h) % free) as usize
    }

    fn vector(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim];
        let lower = text.to_lowercase();
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let word = word.strip_suffix('s').filter(|w| is_class_name(w)).unwrap_or(word);
            v[self.bucket(word)] += 1.0;
        }
        v
    }
}

fn is_class_name(w: &str) -> bool {
    ClassLabel::ALL.iter().any(|c| c.name() == w)
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new("hashing", 1024)
    }
}

impl Embedder for HashingEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        normalize_batch(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// 16-dimensional test double: the sum of `e_i` over class names mentioned.
#[derive(Debug, Clone, Default)]
pub struct OneHotEmbedder;

impl Embedder for OneHotEmbedder {
    fn name(&self) -> &str {
        "one-hot"
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        normalize_batch(
            texts
                .iter()
                .map(|t| {
                    let mut v = vec![0.0f32; ClassLabel::COUNT];
                    for c in mentioned_labels(t) {
                        v[c.index()] = 1.0;
                    }
                    v
                })
                .collect(),
        )
    }
}
