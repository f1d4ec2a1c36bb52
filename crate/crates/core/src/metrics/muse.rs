use serde::{Deserialize, Serialize};

use crate::lm::{LanguageModel, Vocabulary, BOS};
use crate::normal::QARecord;

use super::text::rouge_l;
use super::MetricError;

pub const DEFAULT_PREFIX_LEN: usize = 32;

/// Extra tokens allowed beyond the reference length when decoding.
const DECODE_SLACK: usize = 8;

/// Mean ROUGE-L F1 (×100) between the greedy continuation after the first
/// `l` answer tokens (given the question) and the rest of the answer.
pub fn verbmem(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    records: &[QARecord],
    l: usize,
) -> Result<f64, MetricError> {
    let mut prompts = Vec::new();
    let mut refs = Vec::new();
    let mut max_new = 0;
    for r in records {
        let answer = vocab.encode(&format!(" {}", r.answer));
        if answer.len() < l + 1 {
            log::warn!(
                "verbmem: record {} has {} answer tokens, needs {}; skipped",
                r.id,
                answer.len(),
                l + 1
            );
            continue;
        }
        let mut ctx = vec![BOS];
        ctx.extend(vocab.encode(&r.question));
        ctx.extend_from_slice(&answer[..l]);
        let rest = &answer[l..];
        max_new = usize::max(max_new, rest.len() + DECODE_SLACK);
        prompts.push(ctx);
        refs.push(vocab.decode(rest));
    }
    if prompts.is_empty() {
        return Err(MetricError::EmptySample(
            "verbmem records long enough to split",
        ));
    }
    let outs = model.generate_greedy_batch(&prompts, max_new)?;
    let total: f64 = outs
        .iter()
        .zip(&refs)
        .map(|(o, r)| rouge_l(&vocab.decode(o), r).f1)
        .sum();
    Ok(100.0 * total / refs.len() as f64)
}

/// Greedy answers to each question, decoded to text.
pub fn generate_answers(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    records: &[QARecord],
) -> Result<Vec<String>, MetricError> {
    let mut prompts = Vec::with_capacity(records.len());
    let mut max_new = 0;
    for r in records {
        let mut ctx = vec![BOS];
        ctx.extend(vocab.encode(&r.question));
        max_new = usize::max(
            max_new,
            vocab.encode(&format!(" {}", r.answer)).len() + DECODE_SLACK,
        );
        prompts.push(ctx);
    }
    let outs = model.generate_greedy_batch(&prompts, max_new)?;
    Ok(outs
        .iter()
        .map(|o| vocab.decode(o).trim().to_string())
        .collect())
}

/// Mean ROUGE-L F1 (×100) of generated answers against the references.
pub fn knowmem(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    records: &[QARecord],
) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptySample("knowmem records"));
    }
    let answers = generate_answers(model, vocab, records)?;
    Ok(knowmem_from_answers(&answers, records))
}

pub fn knowmem_from_answers(answers: &[String], records: &[QARecord]) -> f64 {
    let total: f64 = answers
        .iter()
        .zip(records)
        .map(|(a, r)| rouge_l(a, &r.answer).f1)
        .sum();
    100.0 * total / records.len() as f64
}

/// KnowMem on the retain set.
pub fn utility_preservation(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    retain: &[QARecord],
) -> Result<f64, MetricError> {
    knowmem(model, vocab, retain)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Distinct score thresholds, ascending; a sample is called a member
    /// when its score is at most the threshold.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

/// ROC of a lower-is-member score. The curve starts at `(0, 0)` (no
/// threshold) and the AUC is the trapezoid area, which equals
/// `P(member < nonmember) + ½·P(tie)`.
pub fn mia_auc(members: &[f64], nonmembers: &[f64]) -> Result<RocCurve, MetricError> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(MetricError::EmptySample("membership scores"));
    }
    if members.iter().chain(nonmembers).any(|x| x.is_nan()) {
        return Err(MetricError::InvalidInput("membership score is NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (n, m) = (members.len() as u64, nonmembers.len() as u64);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut curve = RocCurve {
        thresholds: Vec::new(),
        tpr: vec![0.0],
        fpr: vec![0.0],
        auc: 0.0,
    };
    let mut area2: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) * (tp + tp0);
        curve.thresholds.push(t);
        curve.tpr.push(tp as f64 / n as f64);
        curve.fpr.push(fp as f64 / m as f64);
    }
    curve.auc = area2 as f64 / (2 * n * m) as f64;
    Ok(curve)
}

/// `(AUC_unlearned − AUC_retrained) / AUC_retrained`, ×100.
pub fn privleak(auc_unlearned: f64, auc_retrained: f64) -> Result<f64, MetricError> {
    if !(auc_retrained > 0.0) {
        return Err(MetricError::ZeroDenominator("retrained AUC"));
    }
    Ok(100.0 * (auc_unlearned - auc_retrained) / auc_retrained)
}
