use std::collections::HashMap;

use crate::lm::{mean_hidden_state, Checkpoint, Vocabulary, BOS};

use super::NormalError;

/// A unit-norm vector stored sparsely as sorted `(index, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl Embedding {
    /// Normalizes `entries` (indices need not be sorted or distinct).
    fn normalized(
        dim: usize,
        entries: impl IntoIterator<Item = (usize, f64)>,
    ) -> Result<Self, NormalError> {
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for (i, v) in entries {
            *acc.entry(i).or_default() += v;
        }
        let mut entries: Vec<(usize, f64)> = acc.into_iter().filter(|(_, v)| *v != 0.0).collect();
        entries.sort_by_key(|e| e.0);
        let norm = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(NormalError::ZeroEmbedding);
        }
        entries.iter_mut().for_each(|e| e.1 /= norm);
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, x) in &self.entries {
            v[i] = x;
        }
        v
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    /// Dot product of two unit vectors, clamped into `[-1, 1]`.
    pub fn cosine(&self, other: &Embedding) -> Result<f64, NormalError> {
        if self.dim != other.dim {
            return Err(NormalError::DimensionMismatch(self.dim, other.dim));
        }
        let (a, b) = (&self.entries, &other.entries);
        let (mut i, mut j, mut dot) = (0, 0, 0.0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        Ok(dot.clamp(-1.0, 1.0))
    }
}

pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding, NormalError>;
}

pub fn embed(text: &str, provider: &dyn EmbeddingProvider) -> Result<Embedding, NormalError> {
    provider.embed(text)
}

pub const DEFAULT_BUCKETS: usize = 1 << 15;

/// Character n-grams hashed into a fixed number of buckets, weighted by
/// term frequency times an optional fitted inverse document frequency.
#[derive(Debug, Clone)]
pub struct HashedNgram {
    n: usize,
    buckets: usize,
    idf: Option<HashMap<usize, f64>>,
    default_idf: f64,
}

impl Default for HashedNgram {
    fn default() -> Self {
        Self::new(3, DEFAULT_BUCKETS)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl HashedNgram {
    pub fn new(n: usize, buckets: usize) -> Self {
        Self {
            n: n.max(1),
            buckets: buckets.max(1),
            idf: None,
            default_idf: 1.0,
        }
    }

    /// Smoothed IDF `ln((1 + N) / (1 + df)) + 1` from a document collection;
    /// unseen buckets get the weight of a bucket with `df = 0`.
    pub fn fit<S: AsRef<str>>(mut self, documents: &[S]) -> Self {
        let mut df: HashMap<usize, usize> = HashMap::new();
        for d in documents {
            let mut seen: Vec<usize> = self.counts(d.as_ref()).into_keys().collect();
            seen.sort_unstable();
            for b in seen {
                *df.entry(b).or_default() += 1;
            }
        }
        let n = documents.len() as f64;
        self.default_idf = ((1.0 + n) / 1.0).ln() + 1.0;
        self.idf = Some(
            df.into_iter()
                .map(|(b, c)| (b, ((1.0 + n) / (1.0 + c as f64)).ln() + 1.0))
                .collect(),
        );
        self
    }

    fn counts(&self, text: &str) -> HashMap<usize, f64> {
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        let mut out: HashMap<usize, f64> = HashMap::new();
        let width = self.n.min(chars.len());
        for w in chars.windows(width) {
            let gram: String = w.iter().collect();
            *out.entry((fnv1a(gram.as_bytes()) % self.buckets as u64) as usize)
                .or_default() += 1.0;
        }
        out
    }
}

impl EmbeddingProvider for HashedNgram {
    fn dim(&self) -> usize {
        self.buckets
    }

    fn embed(&self, text: &str) -> Result<Embedding, NormalError> {
        if text.trim().is_empty() {
            return Err(NormalError::EmptyText);
        }
        let counts = self.counts(text);
        let weighted = counts.into_iter().map(|(b, tf)| {
            let idf = match &self.idf {
                Some(m) => *m.get(&b).unwrap_or(&self.default_idf),
                None => 1.0,
            };
            (b, tf * idf)
        });
        Embedding::normalized(self.buckets, weighted)
    }
}

/// Mean-pooled final hidden states of the language model.
pub struct ModelEmbedding<'a> {
    pub checkpoint: &'a Checkpoint,
    pub vocab: &'a Vocabulary,
}

impl EmbeddingProvider for ModelEmbedding<'_> {
    fn dim(&self) -> usize {
        self.checkpoint.config.d_model
    }

    fn embed(&self, text: &str) -> Result<Embedding, NormalError> {
        if text.trim().is_empty() {
            return Err(NormalError::EmptyText);
        }
        let mut tokens = vec![BOS];
        tokens.extend(self.vocab.encode(text));
        let h = mean_hidden_state(self.checkpoint, &tokens)?;
        Embedding::normalized(h.len(), h.into_iter().enumerate())
    }
}
