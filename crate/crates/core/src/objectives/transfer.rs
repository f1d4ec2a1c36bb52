use crate::lm::{
    answer_logits, next_token_logits, Checkpoint, LanguageModel, ModelError, SequenceScore, EOS,
};

use super::ObjectiveError;

/// `θ_o − (θ_reinforce − θ_o)`.
pub fn task_vector_unlearn(
    theta_original: &[f64],
    theta_reinforced: &[f64],
) -> Result<Vec<f64>, ObjectiveError> {
    if theta_original.len() != theta_reinforced.len() {
        return Err(ObjectiveError::DimensionMismatch {
            expected: theta_original.len(),
            got: theta_reinforced.len(),
        });
    }
    Ok(theta_original
        .iter()
        .zip(theta_reinforced)
        .map(|(o, r)| o - (r - o))
        .collect())
}

/// `p_o − α(p_reinforce − p_o)`, clipped at zero and renormalized.
pub fn whp_distribution(
    p_original: &[f64],
    p_reinforced: &[f64],
    alpha: f64,
) -> Result<Vec<f64>, ObjectiveError> {
    if p_original.len() != p_reinforced.len() {
        return Err(ObjectiveError::DimensionMismatch {
            expected: p_original.len(),
            got: p_reinforced.len(),
        });
    }
    if !alpha.is_finite() {
        return Err(ObjectiveError::InvalidConfig(format!(
            "WHP alpha must be finite, got {alpha}"
        )));
    }
    for p in [p_original, p_reinforced] {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 || p.iter().any(|x| !x.is_finite()) {
            return Err(ObjectiveError::NotADistribution(s));
        }
    }
    let q: Vec<f64> = p_original
        .iter()
        .zip(p_reinforced)
        .map(|(o, r)| (o - alpha * (r - o)).max(0.0))
        .collect();
    let total: f64 = q.iter().sum();
    if !(total > 1e-12) {
        return Err(ObjectiveError::DegenerateWhp);
    }
    Ok(q.into_iter().map(|x| x / total).collect())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Decoding-time combination of an original and a reinforced model: every
/// next-token distribution is replaced by [`whp_distribution`].
pub struct WhpModel<'a> {
    pub original: &'a Checkpoint,
    pub reinforced: &'a Checkpoint,
    pub alpha: f64,
}

impl WhpModel<'_> {
    fn combine(&self, lo: &[f64], lr: &[f64]) -> Result<Vec<f64>, ModelError> {
        whp_distribution(&softmax(lo), &softmax(lr), self.alpha)
            .map_err(|e| ModelError::InvalidConfig(format!("WHP: {e}")))
    }
}

impl LanguageModel for WhpModel<'_> {
    fn max_seq_len(&self) -> usize {
        self.original.config.max_seq_len
    }

    fn score_batch(
        &self,
        pairs: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<Vec<SequenceScore>, ModelError> {
        let v = self.original.config.vocab_size;
        let lo = answer_logits(self.original, pairs)?;
        let lr = answer_logits(self.reinforced, pairs)?;
        let mut out = Vec::with_capacity(pairs.len());
        for ((a, b), (_, answer)) in lo.iter().zip(&lr).zip(pairs) {
            let mut lps = Vec::with_capacity(answer.len());
            for (i, &tok) in answer.iter().enumerate() {
                let q = self.combine(&a[i * v..(i + 1) * v], &b[i * v..(i + 1) * v])?;
                lps.push(q[tok].ln());
            }
            out.push(SequenceScore::from_log_probs(lps));
        }
        Ok(out)
    }

    fn generate_greedy_batch(
        &self,
        prompts: &[Vec<usize>],
        max_new: usize,
    ) -> Result<Vec<Vec<usize>>, ModelError> {
        let limit = self.max_seq_len();
        let mut contexts = prompts.to_vec();
        let mut outputs = vec![Vec::new(); prompts.len()];
        let mut active: Vec<usize> = (0..prompts.len())
            .filter(|&i| max_new > 0 && contexts[i].len() < limit)
            .collect();
        while !active.is_empty() {
            let ctxs: Vec<Vec<usize>> = active.iter().map(|&i| contexts[i].clone()).collect();
            let lo = next_token_logits(self.original, &ctxs)?;
            let lr = next_token_logits(self.reinforced, &ctxs)?;
            let mut still = Vec::new();
            for (r, &i) in active.iter().enumerate() {
                let q = self.combine(&lo[r], &lr[r])?;
                let tok = q
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, p)| if *p > q[best] { j } else { best });
                if tok == EOS {
                    continue;
                }
                contexts[i].push(tok);
                outputs[i].push(tok);
                if outputs[i].len() < max_new && contexts[i].len() < limit {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(outputs)
    }
}
