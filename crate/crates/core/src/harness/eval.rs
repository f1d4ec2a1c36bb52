use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::lm::{LanguageModel, Vocabulary, BOS, EOS};
use crate::metrics::{
    answer_probability_ratio, bleu, forget_quality, fq_gap, generate_answers, knowmem_from_answers,
    mia_auc, model_utility, privleak, rouge_l, truth_ratio, truth_score, verbmem, MetricReport,
};
use crate::normal::QARecord;

use super::corpus::Corpus;
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Answer tokens given to the model before the verbatim continuation.
    pub verbmem_prefix: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { verbmem_prefix: 4 }
    }
}

pub fn digest_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable digest input");
    hex::encode(Sha256::digest(&bytes))
}

fn context(vocab: &Vocabulary, question: &str) -> Vec<usize> {
    let mut c = vec![BOS];
    c.extend(vocab.encode(question));
    c
}

fn answer_tokens(vocab: &Vocabulary, answer: &str) -> Vec<usize> {
    vocab.encode(&format!(" {answer}"))
}

/// Normalized probabilities `P(a|q)^(1/|a|)` of each `(question, answer)`.
fn normalized_probs(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    pairs: &[(&str, &str)],
) -> Result<Vec<f64>, HarnessError> {
    let enc: Vec<(Vec<usize>, Vec<usize>)> = pairs
        .iter()
        .map(|(q, a)| (context(vocab, q), answer_tokens(vocab, a)))
        .collect();
    Ok(model
        .score_batch(&enc)?
        .into_iter()
        .map(|s| s.normalized_prob)
        .collect())
}

/// Per-record answer, paraphrase and perturbed normalized probabilities.
struct ProbTable {
    answer: Vec<f64>,
    paraphrase: Vec<f64>,
    perturbed: Vec<Vec<f64>>,
}

fn prob_table(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    records: &[QARecord],
) -> Result<ProbTable, HarnessError> {
    let mut pairs: Vec<(&str, &str)> = Vec::new();
    let mut spans = Vec::with_capacity(records.len());
    for r in records {
        let start = pairs.len();
        pairs.push((&r.question, &r.answer));
        pairs.push((
            &r.question,
            r.paraphrased_answer.as_deref().unwrap_or(&r.answer),
        ));
        for p in r.perturbed_answers.iter().flatten() {
            pairs.push((&r.question, p));
        }
        spans.push(start..pairs.len());
    }
    let probs = normalized_probs(model, vocab, &pairs)?;
    let mut t = ProbTable {
        answer: Vec::new(),
        paraphrase: Vec::new(),
        perturbed: Vec::new(),
    };
    for span in spans {
        let p = &probs[span];
        if p.len() < 3 {
            return Err(HarnessError::MissingData("perturbed answers"));
        }
        t.answer.push(p[0]);
        t.paraphrase.push(p[1]);
        t.perturbed.push(p[2..].to_vec());
    }
    Ok(t)
}

impl ProbTable {
    fn truth_ratios(&self) -> Result<Vec<f64>, HarnessError> {
        self.perturbed
            .iter()
            .zip(&self.paraphrase)
            .map(|(p, q)| Ok(truth_ratio(p, *q)?))
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Greedy answers with their ROUGE-L recall and BLEU against the references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub answers: Vec<String>,
    pub rouge_recall: f64,
    pub bleu: f64,
    pub knowmem: f64,
}

pub fn generation_scores(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    records: &[QARecord],
) -> Result<GenerationScores, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::MissingData("records to generate for"));
    }
    let answers = generate_answers(model, vocab, records)?;
    let rouge: Vec<f64> = answers
        .iter()
        .zip(records)
        .map(|(a, r)| rouge_l(a, &r.answer).recall)
        .collect();
    let bl: Vec<f64> = answers
        .iter()
        .zip(records)
        .map(|(a, r)| bleu(a, &r.answer))
        .collect();
    Ok(GenerationScores {
        knowmem: knowmem_from_answers(&answers, records),
        answers,
        rouge_recall: mean(&rouge),
        bleu: mean(&bl),
    })
}

/// Mean per-token NLL of each answer, the membership-inference score.
pub fn nll_scores(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    records: &[QARecord],
) -> Result<Vec<f64>, HarnessError> {
    let enc: Vec<(Vec<usize>, Vec<usize>)> = records
        .iter()
        .map(|r| (context(vocab, &r.question), answer_tokens(vocab, &r.answer)))
        .collect();
    Ok(model
        .score_batch(&enc)?
        .iter()
        .map(|s| -s.mean_log_prob())
        .collect())
}

/// `exp` of the mean NLL of answers and their end marker.
pub fn answer_perplexity(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    records: &[QARecord],
) -> Result<f64, HarnessError> {
    let enc: Vec<(Vec<usize>, Vec<usize>)> = records
        .iter()
        .map(|r| {
            let mut a = answer_tokens(vocab, &r.answer);
            a.push(EOS);
            (context(vocab, &r.question), a)
        })
        .collect();
    let scores = model.score_batch(&enc)?;
    let count: usize = scores.iter().map(|s| s.log_probs.len()).sum();
    if count == 0 {
        return Err(HarnessError::MissingData("retain records"));
    }
    let nll: f64 = -scores.iter().map(|s| s.total_log_prob()).sum::<f64>();
    Ok((nll / count as f64).exp())
}

/// Quantities of the retained model that the forgetting metrics compare against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedReference {
    pub forget_truth_ratios: Vec<f64>,
    pub forget_bleu: f64,
    pub forget_rouge: f64,
    pub mia_auc: f64,
}

impl RetainedReference {
    pub fn compute(
        retained: &dyn LanguageModel,
        vocab: &Vocabulary,
        corpus: &Corpus,
    ) -> Result<Self, HarnessError> {
        let t = prob_table(retained, vocab, &corpus.forget)?;
        let g = generation_scores(retained, vocab, &corpus.forget)?;
        let auc = mia_auc(
            &nll_scores(retained, vocab, &corpus.forget)?,
            &nll_scores(retained, vocab, &corpus.holdout)?,
        )?
        .auc;
        Ok(Self {
            forget_truth_ratios: t.truth_ratios()?,
            forget_bleu: g.bleu,
            forget_rouge: g.rouge_recall,
            mia_auc: auc,
        })
    }
}

/// Answer probability, truth score and ROUGE-L recall of one utility subset.
fn utility_triple(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    records: &[QARecord],
    ratio_form: bool,
    digests: &mut BTreeMap<String, String>,
    name: &str,
) -> Result<[f64; 3], HarnessError> {
    let t = prob_table(model, vocab, records)?;
    let prob = if ratio_form {
        // ρ/(1+ρ) = P(a) / (P(a) + Σ P(perturbed)), a score in [0, 1].
        let mut v = Vec::with_capacity(records.len());
        for (a, p) in t.answer.iter().zip(&t.perturbed) {
            let rho = answer_probability_ratio(*a, p)?;
            v.push(rho / (1.0 + rho));
        }
        mean(&v)
    } else {
        mean(&t.answer)
    };
    let truth = mean(
        &t.truth_ratios()?
            .into_iter()
            .map(truth_score)
            .collect::<Vec<_>>(),
    );
    let g = generation_scores(model, vocab, records)?;
    digests.insert(
        format!("MU.{name}"),
        digest_json(&(&t.answer, &t.paraphrase, &t.perturbed, &g.answers)),
    );
    Ok([prob, truth, g.rouge_recall])
}

/// Every metric of `model` against the retained reference.
pub fn evaluate(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    corpus: &Corpus,
    reference: &RetainedReference,
    cfg: &EvalConfig,
) -> Result<MetricReport, HarnessError> {
    let mut d = BTreeMap::new();
    let forget_table = prob_table(model, vocab, &corpus.forget)?;
    let tr = forget_table.truth_ratios()?;
    let fq = forget_quality(&tr, &reference.forget_truth_ratios)?;
    d.insert(
        "FQ".into(),
        digest_json(&(&tr, &reference.forget_truth_ratios)),
    );

    let fg = generation_scores(model, vocab, &corpus.forget)?;
    let rg = generation_scores(model, vocab, &corpus.retain)?;
    d.insert("F-RL".into(), digest_json(&fg.answers));
    d.insert("R-RL".into(), digest_json(&rg.answers));

    let mut scores = Vec::with_capacity(9);
    scores.extend(utility_triple(
        model,
        vocab,
        &corpus.retain,
        false,
        &mut d,
        "retain",
    )?);
    scores.extend(utility_triple(
        model,
        vocab,
        &corpus.real_authors,
        true,
        &mut d,
        "real_authors",
    )?);
    scores.extend(utility_triple(
        model,
        vocab,
        &corpus.world_facts,
        true,
        &mut d,
        "world_facts",
    )?);
    let mu = model_utility(&scores)?;

    let ppl = answer_perplexity(model, vocab, &corpus.retain)?;
    d.insert("PPL".into(), digest_json(&corpus.retain));

    let vm = verbmem(model, vocab, &corpus.forget, cfg.verbmem_prefix)?;
    d.insert(
        "VerbMem".into(),
        digest_json(&(&corpus.forget, cfg.verbmem_prefix)),
    );

    let members = nll_scores(model, vocab, &corpus.forget)?;
    let nonmembers = nll_scores(model, vocab, &corpus.holdout)?;
    let auc = mia_auc(&members, &nonmembers)?.auc;
    d.insert(
        "PrivLeak".into(),
        digest_json(&(&members, &nonmembers, reference.mia_auc)),
    );

    let report = MetricReport {
        forget_quality: Some(fq),
        model_utility: Some(mu),
        forget_rouge: Some(fg.rouge_recall),
        retain_rouge: Some(rg.rouge_recall),
        fq_gap: Some(fq_gap(
            (fg.bleu, fg.rouge_recall),
            (reference.forget_bleu, reference.forget_rouge),
        )),
        perplexity: Some(ppl),
        bleu: Some(fg.bleu),
        verbmem: Some(vm),
        knowmem_forget: Some(fg.knowmem),
        knowmem_retain: Some(rg.knowmem),
        privleak: Some(privleak(auc, reference.mia_auc)?),
        inputs_digest: d,
    };
    Ok(report)
}
