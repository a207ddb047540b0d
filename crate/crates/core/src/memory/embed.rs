use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::MemoryError;

/// Dimension of the default trigram embedder.
pub const DEFAULT_DIM: usize = 256;

/// A unit-norm retrieval key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemoryKey(Vec<f64>);

impl MemoryKey {
    /// L2-normalizes `v`. A zero (or empty-information) vector becomes the
    /// normalized all-ones vector so cosine stays defined.
    pub fn from_vector(mut v: Vec<f64>) -> Self {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            let fill = 1.0 / (v.len().max(1) as f64).sqrt();
            v.iter_mut().for_each(|x| *x = fill);
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        MemoryKey(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Dot product of two unit keys.
pub fn cosine(a: &MemoryKey, b: &MemoryKey) -> Result<f64, MemoryError> {
    if a.dim() != b.dim() {
        return Err(MemoryError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum())
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<MemoryKey, MemoryError>;
}

/// Hashes lowercase character trigrams into a fixed number of buckets.
#[derive(Debug, Clone)]
pub struct TrigramEmbedder {
    dim: usize,
}

impl TrigramEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        TrigramEmbedder { dim }
    }
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        TrigramEmbedder::new(DEFAULT_DIM)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Lowercases, collapses whitespace and pads with one space on each side.
pub fn normalize_text(text: &str) -> Vec<char> {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    if collapsed.is_empty() {
        return Vec::new();
    }
    let mut chars = vec![' '];
    chars.extend(collapsed.chars());
    chars.push(' ');
    chars
}

impl Embedder for TrigramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<MemoryKey, MemoryError> {
        let chars = normalize_text(text);
        let mut v = vec![0.0; self.dim];
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            v[(fnv1a(&buf[..len]) % self.dim as u64) as usize] += 1.0;
        }
        Ok(MemoryKey::from_vector(v))
    }
}

/// Embedding service speaking the common `{model, input}` → `{data:[{embedding}]}` shape.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    pub dim: usize,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<MemoryKey, MemoryError> {
        let unavailable = |e: String| MemoryError::EmbedBackendUnavailable(e);
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut req = agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let reply: EmbeddingReply = req
            .send_json(serde_json::json!({ "model": self.model, "input": text }))
            .map_err(|e| unavailable(e.to_string()))?
            .into_json()
            .map_err(|e| unavailable(e.to_string()))?;
        let v = reply
            .data
            .into_iter()
            .next()
            .ok_or_else(|| unavailable("empty embedding reply".into()))?
            .embedding;
        if v.len() != self.dim {
            return Err(MemoryError::DimensionMismatch { left: self.dim, right: v.len() });
        }
        Ok(MemoryKey::from_vector(v))
    }
}
