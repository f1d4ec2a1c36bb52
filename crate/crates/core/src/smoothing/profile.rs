use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::lm::{Checkpoint, Example, SequenceBatch};

use super::bundle::{deflection_vector, dot, forget_gradient, normal_gradient, ZERO_TOL};
use super::{GradientBundle, SmoothingError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
    Zero,
}

impl Sign {
    pub fn of(x: f64) -> Self {
        if x.abs() <= ZERO_TOL {
            Sign::Zero
        } else if x > 0.0 {
            Sign::Positive
        } else {
            Sign::Negative
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignRow {
    pub instance_id: usize,
    pub inner_product: f64,
    pub sign: Sign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignSummary {
    pub instances: usize,
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignProfile {
    pub rows: Vec<SignRow>,
    pub summary: SignSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Line {
    Instance(SignRow),
    Summary(SignSummary),
}

impl SignProfile {
    fn from_rows(rows: Vec<SignRow>) -> Self {
        let count = |s| rows.iter().filter(|r| r.sign == s).count();
        let summary = SignSummary {
            instances: rows.len(),
            positive: count(Sign::Positive),
            negative: count(Sign::Negative),
            zero: count(Sign::Zero),
        };
        Self { rows, summary }
    }

    /// One JSON object per instance followed by a summary object.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), SmoothingError> {
        for row in &self.rows {
            let line = serde_json::to_string(&Line::Instance(row.clone()))
                .map_err(|e| SmoothingError::Format(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        let line = serde_json::to_string(&Line::Summary(self.summary))
            .map_err(|e| SmoothingError::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, SmoothingError> {
        let mut rows = Vec::new();
        let mut summary = None;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(|e| SmoothingError::Format(e.to_string()))? {
                Line::Instance(row) => rows.push(row),
                Line::Summary(s) => summary = Some(s),
            }
        }
        let profile = Self::from_rows(rows);
        match summary {
            Some(s) if s == profile.summary => Ok(profile),
            Some(_) => Err(SmoothingError::Format(
                "summary does not match instance rows".into(),
            )),
            None => Err(SmoothingError::Format("missing summary record".into())),
        }
    }
}

/// Sign of `<g_f, u>` for each bundle.
pub fn sign_profile(bundles: &[GradientBundle]) -> Result<SignProfile, SmoothingError> {
    if bundles.is_empty() {
        return Err(SmoothingError::Empty);
    }
    let rows = bundles
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let ip = dot(b.g_f(), &deflection_vector(b));
            SignRow {
                instance_id: i,
                inner_product: ip,
                sign: Sign::of(ip),
            }
        })
        .collect();
    Ok(SignProfile::from_rows(rows))
}

/// One bundle per forget record: `g_f` from the record alone and one `g_p`
/// per companion normal example.
pub fn instance_bundles(
    ckpt: &Checkpoint,
    forget: &[Example],
    normals: &[Vec<Example>],
    k: usize,
) -> Result<Vec<GradientBundle>, SmoothingError> {
    if forget.len() != normals.len() {
        return Err(SmoothingError::Misaligned(forget.len(), normals.len()));
    }
    forget
        .iter()
        .zip(normals)
        .map(|(f, ns)| {
            let g_f = forget_gradient(
                ckpt,
                &SequenceBatch::from_examples(std::slice::from_ref(f))?,
            )?;
            let g_p = ns
                .iter()
                .map(|n| {
                    normal_gradient(
                        ckpt,
                        &SequenceBatch::from_examples(std::slice::from_ref(n))?,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            GradientBundle::new(g_f, g_p, k)
        })
        .collect()
}
