use super::embed::{Embedding, EmbeddingProvider};
use super::set::{fallback_safe_response, Companion};
use super::{NormalError, QARecord};

/// Retain records with precomputed embeddings of their question+answer text.
pub struct SimilarityIndex<'a> {
    records: &'a [QARecord],
    embeddings: Vec<Embedding>,
    provider: &'a dyn EmbeddingProvider,
}

impl<'a> SimilarityIndex<'a> {
    pub fn build(
        records: &'a [QARecord],
        provider: &'a dyn EmbeddingProvider,
    ) -> Result<Self, NormalError> {
        let embeddings = records
            .iter()
            .map(|r| provider.embed(&r.text()))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            records,
            embeddings,
            provider,
        })
    }

    /// Every retain record with its cosine to `forget`, best first; ties keep
    /// corpus order.
    pub fn ranked(&self, forget: &QARecord) -> Result<Vec<(&'a QARecord, f64)>, NormalError> {
        let q = self.provider.embed(&forget.text())?;
        let mut scored = Vec::with_capacity(self.records.len());
        for (rec, e) in self.records.iter().zip(&self.embeddings) {
            scored.push((rec, q.cosine(e)?));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(scored)
    }

    /// Top-`m` records with similarity at least `threshold`; any shortfall
    /// is filled with refusal companions when `allow_fallback` is set.
    pub fn select(
        &self,
        forget: &QARecord,
        m: usize,
        threshold: f64,
        allow_fallback: bool,
    ) -> Result<Vec<Companion>, NormalError> {
        if m == 0 {
            return Err(NormalError::InvalidConfig("M must be at least 1".into()));
        }
        if !threshold.is_finite() {
            return Err(NormalError::InvalidConfig(format!(
                "threshold {threshold} is not finite"
            )));
        }
        let mut out: Vec<Companion> = self
            .ranked(forget)?
            .into_iter()
            .filter(|(_, s)| *s >= threshold)
            .take(m)
            .map(|(r, s)| Companion::selected(r, s))
            .collect();
        if out.len() < m && !allow_fallback {
            return Err(NormalError::Shortfall {
                forget_id: forget.id.clone(),
                found: out.len(),
                wanted: m,
            });
        }
        for i in 0..m - out.len() {
            out.push(fallback_safe_response(forget, i));
        }
        Ok(out)
    }
}

pub fn select_similar_retain(
    forget: &QARecord,
    retain: &[QARecord],
    m: usize,
    threshold: f64,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<Companion>, NormalError> {
    SimilarityIndex::build(retain, provider)?.select(forget, m, threshold, true)
}
