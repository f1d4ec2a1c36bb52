use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NormalError;

/// One question/answer pair of a corpus split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QARecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paraphrased_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbed_answers: Option<Vec<String>>,
}

impl QARecord {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            answer: answer.into(),
            paraphrased_answer: None,
            perturbed_answers: None,
        }
    }

    /// Question and answer joined, the text used for similarity search.
    pub fn text(&self) -> String {
        format!("{} {}", self.question, self.answer)
    }

    pub fn validate(&self) -> Result<(), NormalError> {
        if self.question.trim().is_empty() || self.answer.trim().is_empty() {
            return Err(NormalError::InvalidRecord(self.id.clone()));
        }
        Ok(())
    }
}

/// Checks every record and that ids are unique.
pub fn validate_corpus(records: &[QARecord]) -> Result<(), NormalError> {
    let mut seen = HashSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert(r.id.as_str()) {
            return Err(NormalError::DuplicateId(r.id.clone()));
        }
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<QARecord>, NormalError> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QARecord = serde_json::from_str(&line)
            .map_err(|e| NormalError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    validate_corpus(&out)?;
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[QARecord]) -> Result<(), NormalError> {
    validate_corpus(records)?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| NormalError::Format(e.to_string()))?;
        buf.write_all(b"\n")?;
    }
    fs::write(path, buf)?;
    Ok(())
}
