//! Scoring, decoding and perplexity over a frozen checkpoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mark, Tape};

use super::model::{hidden_states, logits_at, target_log_probs, ParamVars};
use super::vocab::{EOS, PAD};
use super::{Checkpoint, ModelError, SequenceBatch};

const SCORE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

/// Per-token log-probabilities of an answer given its prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub log_probs: Vec<f64>,
    /// `P(answer | prompt)^(1/|answer|)`.
    pub normalized_prob: f64,
}

impl SequenceScore {
    pub fn from_log_probs(log_probs: Vec<f64>) -> Self {
        let mean = log_probs.iter().sum::<f64>() / log_probs.len() as f64;
        Self {
            log_probs,
            normalized_prob: mean.exp(),
        }
    }

    pub fn mean_log_prob(&self) -> f64 {
        self.log_probs.iter().sum::<f64>() / self.log_probs.len() as f64
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Parameters loaded once as constants; each forward rewinds to the mark.
struct Session<'a> {
    ckpt: &'a Checkpoint,
    tape: Tape,
    params: ParamVars,
    mark: Mark,
}

impl<'a> Session<'a> {
    fn new(ckpt: &'a Checkpoint) -> Result<Self, ModelError> {
        let mut tape = Tape::new();
        let params = ParamVars::load(&mut tape, ckpt, false)?;
        let mark = tape.mark();
        Ok(Self {
            ckpt,
            tape,
            params,
            mark,
        })
    }

    /// Log-probabilities of the supervised targets, grouped per row.
    fn supervised_log_probs(&mut self, batch: &SequenceBatch) -> Result<Vec<Vec<f64>>, ModelError> {
        self.tape.rewind(self.mark);
        let t = target_log_probs(&mut self.tape, &self.ckpt.config, &self.params, batch)?;
        let mut out = vec![Vec::new(); batch.rows()];
        for (lp, &r) in self.tape.value(t.log_probs).iter().zip(&t.rows) {
            out[r].push(*lp);
        }
        Ok(out)
    }

    /// Next-token logits after each context, `contexts.len() * V` values.
    fn last_logits(&mut self, contexts: &[&[usize]]) -> Result<Vec<f64>, ModelError> {
        self.tape.rewind(self.mark);
        let seq_len = contexts.iter().map(|c| c.len()).max().unwrap_or(0);
        let mut inputs = vec![PAD; contexts.len() * seq_len];
        let mut last = Vec::with_capacity(contexts.len());
        for (r, c) in contexts.iter().enumerate() {
            inputs[r * seq_len..r * seq_len + c.len()].copy_from_slice(c);
            last.push(r * seq_len + c.len() - 1);
        }
        let cfg = &self.ckpt.config;
        let h = hidden_states(
            &mut self.tape,
            cfg,
            &self.params,
            &inputs,
            contexts.len(),
            seq_len,
        )?;
        let logits = logits_at(&mut self.tape, &self.params, h, &last)?;
        Ok(self.tape.value(logits).to_vec())
    }
}

fn scoring_batch(items: &[(&[usize], &[usize])]) -> Result<SequenceBatch, ModelError> {
    let seq_len = items
        .iter()
        .map(|(p, a)| p.len() + a.len() - 1)
        .max()
        .unwrap_or(1);
    let n = items.len() * seq_len;
    let mut inputs = vec![PAD; n];
    let mut targets = vec![PAD; n];
    let mut mask = vec![false; n];
    for (r, (p, a)) in items.iter().enumerate() {
        let base = r * seq_len;
        let full: Vec<usize> = p.iter().chain(a.iter()).copied().collect();
        for i in 0..full.len() - 1 {
            inputs[base + i] = full[i];
            targets[base + i] = full[i + 1];
            mask[base + i] = i + 1 >= p.len();
        }
    }
    SequenceBatch::new(items.len(), seq_len, inputs, targets, mask)
}

fn check_pair(ckpt: &Checkpoint, prompt: &[usize], answer: &[usize]) -> Result<(), ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    if answer.is_empty() {
        return Err(ModelError::EmptyAnswer);
    }
    let len = prompt.len() + answer.len();
    if len > ckpt.config.max_seq_len {
        return Err(ModelError::ContextOverflow {
            len,
            max: ckpt.config.max_seq_len,
        });
    }
    Ok(())
}

/// Log-probability of each answer token given the prompt (which should
/// start with `BOS`) and the preceding answer tokens.
pub fn score_sequence(
    ckpt: &Checkpoint,
    prompt: &[usize],
    answer: &[usize],
) -> Result<SequenceScore, ModelError> {
    let mut scores = score_batch(ckpt, &[(prompt.to_vec(), answer.to_vec())])?;
    Ok(scores.remove(0))
}

/// [`score_sequence`] over many pairs, evaluated in padded chunks.
pub fn score_batch(
    ckpt: &Checkpoint,
    pairs: &[(Vec<usize>, Vec<usize>)],
) -> Result<Vec<SequenceScore>, ModelError> {
    for (p, a) in pairs {
        check_pair(ckpt, p, a)?;
    }
    let mut session = Session::new(ckpt)?;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(SCORE_CHUNK) {
        let items: Vec<(&[usize], &[usize])> = chunk
            .iter()
            .map(|(p, a)| (p.as_slice(), a.as_slice()))
            .collect();
        let batch = scoring_batch(&items)?;
        for lps in session.supervised_log_probs(&batch)? {
            out.push(SequenceScore::from_log_probs(lps));
        }
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Continues `prompt` until `EOS`, `max_new` tokens, or the context limit.
/// The returned continuation excludes `EOS`.
pub fn generate(
    ckpt: &Checkpoint,
    prompt: &[usize],
    max_new: usize,
    mode: DecodeMode,
) -> Result<Vec<usize>, ModelError> {
    match mode {
        DecodeMode::Greedy => {
            Ok(generate_greedy_batch(ckpt, &[prompt.to_vec()], max_new)?.remove(0))
        }
        DecodeMode::Temperature { temperature, seed } => {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(ModelError::InvalidTemperature(temperature));
            }
            if prompt.is_empty() {
                return Err(ModelError::EmptyPrompt);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut session = Session::new(ckpt)?;
            let mut ctx = prompt.to_vec();
            let mut out = Vec::new();
            while out.len() < max_new && ctx.len() < ckpt.config.max_seq_len {
                let logits = session.last_logits(&[&ctx])?;
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits
                    .iter()
                    .map(|l| ((l - max) / temperature).exp())
                    .collect();
                let total: f64 = w.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut tok = w.len() - 1;
                for (i, wi) in w.iter().enumerate() {
                    if u < *wi {
                        tok = i;
                        break;
                    }
                    u -= wi;
                }
                if tok == EOS {
                    break;
                }
                ctx.push(tok);
                out.push(tok);
            }
            Ok(out)
        }
    }
}

/// Greedy continuations of several prompts, decoded together.
pub fn generate_greedy_batch(
    ckpt: &Checkpoint,
    prompts: &[Vec<usize>],
    max_new: usize,
) -> Result<Vec<Vec<usize>>, ModelError> {
    if prompts.iter().any(|p| p.is_empty()) {
        return Err(ModelError::EmptyPrompt);
    }
    if let Some(p) = prompts.iter().find(|p| p.len() > ckpt.config.max_seq_len) {
        return Err(ModelError::ContextOverflow {
            len: p.len(),
            max: ckpt.config.max_seq_len,
        });
    }
    let mut outputs = vec![Vec::new(); prompts.len()];
    let mut contexts: Vec<Vec<usize>> = prompts.to_vec();
    let mut active: Vec<usize> = (0..prompts.len())
        .filter(|&i| max_new > 0 && contexts[i].len() < ckpt.config.max_seq_len)
        .collect();
    let mut session = Session::new(ckpt)?;
    let v = ckpt.config.vocab_size;
    while !active.is_empty() {
        let ctxs: Vec<&[usize]> = active.iter().map(|&i| contexts[i].as_slice()).collect();
        let logits = session.last_logits(&ctxs)?;
        let mut still = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            let tok = argmax(&logits[r * v..(r + 1) * v]);
            if tok == EOS {
                continue;
            }
            contexts[i].push(tok);
            outputs[i].push(tok);
            if outputs[i].len() < max_new && contexts[i].len() < ckpt.config.max_seq_len {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(outputs)
}

/// `exp` of the token-weighted mean masked cross-entropy over all batches.
pub fn perplexity(ckpt: &Checkpoint, batches: &[SequenceBatch]) -> Result<f64, ModelError> {
    let (nll, count) = total_nll(ckpt, batches)?;
    if count == 0 {
        return Err(ModelError::EmptyCorpus);
    }
    Ok((nll / count as f64).exp())
}

/// Summed negative log-likelihood and supervised-token count.
pub fn total_nll(ckpt: &Checkpoint, batches: &[SequenceBatch]) -> Result<(f64, usize), ModelError> {
    if batches.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let mut session = Session::new(ckpt)?;
    let mut nll = 0.0;
    let mut count = 0;
    for b in batches {
        if b.supervised_count() == 0 {
            continue;
        }
        for row in session.supervised_log_probs(b)? {
            count += row.len();
            nll -= row.iter().sum::<f64>();
        }
    }
    Ok((nll, count))
}

/// One cell of a token-probability inspection table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProbRow {
    pub checkpoint: String,
    pub position: usize,
    pub token: usize,
    pub probability: f64,
}

/// Probability of each target token (teacher-forced after `prompt`) under
/// every named checkpoint.
pub fn token_probability_report(
    checkpoints: &[(String, &Checkpoint)],
    prompt: &[usize],
    targets: &[usize],
) -> Result<Vec<TokenProbRow>, ModelError> {
    let mut rows = Vec::new();
    for (name, ck) in checkpoints {
        if let Some(&bad) = targets.iter().find(|&&t| t >= ck.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: bad,
                vocab: ck.config.vocab_size,
            });
        }
        let score = score_sequence(ck, prompt, targets)?;
        for (i, (&tok, lp)) in targets.iter().zip(&score.log_probs).enumerate() {
            rows.push(TokenProbRow {
                checkpoint: name.clone(),
                position: i,
                token: tok,
                probability: lp.exp(),
            });
        }
    }
    Ok(rows)
}

/// Per-row log-probabilities of the supervised targets of `batch`.
pub fn supervised_log_probs(
    ckpt: &Checkpoint,
    batch: &SequenceBatch,
) -> Result<Vec<Vec<f64>>, ModelError> {
    Session::new(ckpt)?.supervised_log_probs(batch)
}

/// Logits `[M, V]` at the supervised positions of `batch`, row-major.
pub fn supervised_logits(ckpt: &Checkpoint, batch: &SequenceBatch) -> Result<Vec<f64>, ModelError> {
    let mut s = Session::new(ckpt)?;
    let t = target_log_probs(&mut s.tape, &ckpt.config, &s.params, batch)?;
    Ok(s.tape.value(t.logits).to_vec())
}

/// Next-token logits after each context, one `V`-row per context.
pub fn next_token_logits(
    ckpt: &Checkpoint,
    contexts: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>, ModelError> {
    if contexts.iter().any(|c| c.is_empty()) {
        return Err(ModelError::EmptyPrompt);
    }
    let mut session = Session::new(ckpt)?;
    let v = ckpt.config.vocab_size;
    let mut out = Vec::with_capacity(contexts.len());
    for chunk in contexts.chunks(SCORE_CHUNK) {
        let ctxs: Vec<&[usize]> = chunk.iter().map(|c| c.as_slice()).collect();
        let logits = session.last_logits(&ctxs)?;
        out.extend(logits.chunks(v).map(|r| r.to_vec()));
    }
    Ok(out)
}

/// Logits at every answer position of each `(prompt, answer)` pair, as
/// `|answer| * V` row-major values per pair.
pub fn answer_logits(
    ckpt: &Checkpoint,
    pairs: &[(Vec<usize>, Vec<usize>)],
) -> Result<Vec<Vec<f64>>, ModelError> {
    for (p, a) in pairs {
        check_pair(ckpt, p, a)?;
    }
    let mut session = Session::new(ckpt)?;
    let v = ckpt.config.vocab_size;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(SCORE_CHUNK) {
        let items: Vec<(&[usize], &[usize])> = chunk
            .iter()
            .map(|(p, a)| (p.as_slice(), a.as_slice()))
            .collect();
        let batch = scoring_batch(&items)?;
        session.tape.rewind(session.mark);
        let t = target_log_probs(&mut session.tape, &ckpt.config, &session.params, &batch)?;
        let logits = session.tape.value(t.logits);
        let mut rows = vec![Vec::new(); chunk.len()];
        for (i, &r) in t.rows.iter().enumerate() {
            rows[r].extend_from_slice(&logits[i * v..(i + 1) * v]);
        }
        out.extend(rows);
    }
    Ok(out)
}

/// Mean of the final hidden states over the tokens of one sequence.
pub fn mean_hidden_state(ckpt: &Checkpoint, tokens: &[usize]) -> Result<Vec<f64>, ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    let tokens = &tokens[..tokens.len().min(ckpt.config.max_seq_len)];
    let mut session = Session::new(ckpt)?;
    let h = hidden_states(
        &mut session.tape,
        &ckpt.config,
        &session.params,
        tokens,
        1,
        tokens.len(),
    )?;
    let d = ckpt.config.d_model;
    let mut mean = vec![0.0; d];
    for row in session.tape.value(h).chunks(d) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / tokens.len() as f64;
        }
    }
    Ok(mean)
}

/// What the evaluation code needs from a model: teacher-forced answer
/// scores and greedy decoding.
pub trait LanguageModel {
    fn max_seq_len(&self) -> usize;
    fn score_batch(
        &self,
        pairs: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<Vec<SequenceScore>, ModelError>;
    fn generate_greedy_batch(
        &self,
        prompts: &[Vec<usize>],
        max_new: usize,
    ) -> Result<Vec<Vec<usize>>, ModelError>;
}

impl LanguageModel for Checkpoint {
    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn score_batch(
        &self,
        pairs: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<Vec<SequenceScore>, ModelError> {
        score_batch(self, pairs)
    }

    fn generate_greedy_batch(
        &self,
        prompts: &[Vec<usize>],
        max_new: usize,
    ) -> Result<Vec<Vec<usize>>, ModelError> {
        generate_greedy_batch(self, prompts, max_new)
    }
}
