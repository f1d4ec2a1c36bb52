use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NormalError, QARecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Selected,
    Generated,
    Fallback,
}

/// A normal-data record paired with one forget record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Companion {
    pub question: String,
    pub answer: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

impl Companion {
    pub fn selected(record: &QARecord, similarity: f64) -> Self {
        Self {
            question: record.question.clone(),
            answer: record.answer.clone(),
            provenance: Provenance::Selected,
            similarity: Some(similarity),
        }
    }

    /// The companion as a corpus record under `id`.
    pub fn record(&self, id: impl Into<String>) -> QARecord {
        QARecord::new(id, &self.question, &self.answer)
    }
}

pub const REFUSALS: [&str; 3] = [
    "I don't know.",
    "I'm not able to help with that.",
    "I don't have information about that.",
];

/// Refusal companion: the forget question with a rotating refusal answer.
pub fn fallback_safe_response(forget: &QARecord, variant: usize) -> Companion {
    Companion {
        question: forget.question.clone(),
        answer: REFUSALS[variant % REFUSALS.len()].to_string(),
        provenance: Provenance::Fallback,
        similarity: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalEntry {
    pub forget_id: String,
    pub companions: Vec<Companion>,
}

/// Companions for every forget record, ordered by forget id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormalSet {
    entries: Vec<NormalEntry>,
}

impl NormalSet {
    pub fn new(mut entries: Vec<NormalEntry>) -> Result<Self, NormalError> {
        entries.sort_by(|a, b| a.forget_id.cmp(&b.forget_id));
        for w in entries.windows(2) {
            if w[0].forget_id == w[1].forget_id {
                return Err(NormalError::DuplicateId(w[0].forget_id.clone()));
            }
        }
        if let Some(first) = entries.first() {
            let m = first.companions.len();
            if let Some(bad) = entries.iter().find(|e| e.companions.len() != m) {
                return Err(NormalError::Format(format!(
                    "forget record {} has {} companions, expected {m}",
                    bad.forget_id,
                    bad.companions.len()
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[NormalEntry] {
        &self.entries
    }

    /// Companions per forget record.
    pub fn m(&self) -> usize {
        self.entries.first().map_or(0, |e| e.companions.len())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, forget_id: &str) -> Option<&[Companion]> {
        self.entries
            .binary_search_by(|e| e.forget_id.as_str().cmp(forget_id))
            .ok()
            .map(|i| self.entries[i].companions.as_slice())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>, NormalError> {
        let mut buf = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut buf, e).map_err(|e| NormalError::Format(e.to_string()))?;
            buf.write_all(b"\n")?;
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), NormalError> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NormalError> {
        let file = fs::File::open(path)?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line).map_err(|e| {
                    NormalError::Format(format!("{}:{}: {e}", path.display(), i + 1))
                })?,
            );
        }
        Self::new(entries)
    }
}
