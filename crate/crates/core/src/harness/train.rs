use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lm::{
    descend, perplexity, AdamW, Checkpoint, Example, ModelError, SequenceBatch, Vocabulary,
};
use crate::normal::QARecord;
use crate::objectives::{
    method_loss, task_vector_unlearn, Method, ObjectiveInputs, UnlearnMethodConfig,
};

use super::HarnessError;

/// Prompt is the question, answer is the space-prefixed answer text.
pub fn encode_pair(vocab: &Vocabulary, question: &str, answer: &str) -> Example {
    Example::new(vocab.encode(question), vocab.encode(&format!(" {answer}")))
}

pub fn encode_record(vocab: &Vocabulary, r: &QARecord) -> Example {
    encode_pair(vocab, &r.question, &r.answer)
}

/// Training examples for `records`: each question paired with its answer
/// twice and, when present, with its paraphrase once. The 2:1 ratio keeps
/// the primary phrasing the greedy answer while the model still learns the
/// fact in a second wording.
pub fn training_examples(vocab: &Vocabulary, records: &[QARecord]) -> Vec<Example> {
    let mut out = Vec::with_capacity(records.len() * 3);
    for r in records {
        let e = encode_record(vocab, r);
        out.push(e.clone());
        out.push(e);
        if let Some(p) = &r.paraphrased_answer {
            out.push(encode_pair(vocab, &r.question, p));
        }
    }
    out
}

/// Answer-supervised batches of at most `batch_size` rows, in order.
pub fn batches(examples: &[Example], batch_size: usize) -> Result<Vec<SequenceBatch>, ModelError> {
    examples
        .chunks(batch_size.max(1))
        .map(SequenceBatch::from_examples)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Decay the learning rate linearly to zero over the run.
    pub decay: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-4,
            batch_size: 32,
            decay: false,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.batch_size == 0 || !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(HarnessError::InvalidConfig(format!(
                "invalid schedule {self:?}"
            )));
        }
        Ok(())
    }

    /// Learning rate of step `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.decay && total > 0 {
            self.lr * (1.0 - step as f64 / total as f64)
        } else {
            self.lr
        }
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    idx
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

/// Supervised finetuning with per-epoch shuffles drawn from `seed`.
pub fn finetune(
    ckpt: &mut Checkpoint,
    examples: &[Example],
    sched: &Schedule,
    seed: u64,
    opt: &AdamW,
) -> Result<TrainStats, HarnessError> {
    sched.validate()?;
    if examples.is_empty() {
        return Err(HarnessError::InvalidConfig("no training examples".into()));
    }
    let mut stats = TrainStats::default();
    let total = sched.epochs * examples.len().div_ceil(sched.batch_size);
    for epoch in 0..sched.epochs {
        let order = epoch_order(examples.len(), seed, epoch);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(sched.batch_size) {
            let rows: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let batch = SequenceBatch::from_examples(&rows)?;
            let graph = crate::lm::sft_loss(ckpt, &batch)?;
            sum += descend(ckpt, &graph, sched.lr_at(stats.steps, total), opt)?;
            n += 1;
            stats.steps += 1;
        }
        stats.epoch_losses.push(sum / n as f64);
    }
    Ok(stats)
}

/// Per-forget-record training material for the unlearning objectives.
#[derive(Debug, Clone, Default)]
pub struct UnlearnData {
    pub forget: Vec<Example>,
    /// Companions of each forget record, aligned with `forget`.
    pub normals: Vec<Vec<Example>>,
    pub retain: Vec<Example>,
    /// Forget question with a refusal answer.
    pub refusal: Vec<Example>,
    /// Forget question with an unrelated answer.
    pub random: Vec<Example>,
}

/// Halts a run whose retain perplexity exceeds `max_ppl`.
#[derive(Debug, Clone)]
pub struct DivergenceGuard {
    pub retain: Vec<SequenceBatch>,
    pub max_ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retain_ppl: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub checkpoint: Checkpoint,
    pub steps: usize,
    /// Step at which the run was halted as diverged.
    pub diverged_at: Option<usize>,
    pub history: Vec<EpochLog>,
}

fn pick(
    pool: &[Example],
    idx: &[usize],
    what: &'static str,
) -> Result<SequenceBatch, HarnessError> {
    if pool.is_empty() {
        return Err(HarnessError::MissingData(what));
    }
    let rows: Vec<Example> = idx.iter().map(|&i| pool[i % pool.len()].clone()).collect();
    Ok(SequenceBatch::from_examples(&rows)?)
}

fn descend_objective(
    ckpt: &mut Checkpoint,
    original: &Checkpoint,
    cfg: &UnlearnMethodConfig,
    data: &UnlearnData,
    chunk: &[usize],
    retain_idx: &[usize],
    opt: &AdamW,
    lr: f64,
) -> Result<f64, HarnessError> {
    let forget = pick(&data.forget, chunk, "forget examples")?;
    let needs = |m: &[Method]| m.contains(&cfg.method);
    let normals: Vec<SequenceBatch> = if cfg.method == Method::Sga {
        (0..cfg.normal_count())
            .map(|k| {
                let rows = chunk
                    .iter()
                    .map(|&i| {
                        let comp = data
                            .normals
                            .get(i)
                            .filter(|c| !c.is_empty())
                            .ok_or(HarnessError::MissingData("normal set"))?;
                        Ok(comp[k % comp.len()].clone())
                    })
                    .collect::<Result<Vec<_>, HarnessError>>()?;
                Ok(SequenceBatch::from_examples(&rows)?)
            })
            .collect::<Result<_, HarnessError>>()?
    } else {
        Vec::new()
    };
    let retain = if needs(&[
        Method::Gd,
        Method::Kl,
        Method::Po,
        Method::DpoRt,
        Method::NpoRt,
        Method::Mismatch,
        Method::Llmu,
    ]) {
        Some(pick(&data.retain, retain_idx, "retain examples")?)
    } else {
        None
    };
    let refusal = if needs(&[Method::Po, Method::Dpo, Method::DpoRt, Method::Flat]) {
        Some(pick(&data.refusal, chunk, "refusal examples")?)
    } else {
        None
    };
    let random = if needs(&[Method::Mismatch, Method::Llmu]) {
        Some(pick(&data.random, chunk, "random examples")?)
    } else {
        None
    };
    let mut inputs = ObjectiveInputs::new(&forget).normals(&normals);
    if let Some(r) = &retain {
        inputs = inputs.retain(r);
    }
    if let Some(r) = &refusal {
        inputs = inputs.refusal(r);
    }
    if let Some(r) = &random {
        inputs = inputs.random(r);
    }
    if cfg.method.needs_reference() {
        inputs = inputs.reference(original);
    }
    let obj = method_loss(ckpt, cfg, inputs)?;
    Ok(descend(ckpt, &obj.graph, lr, opt)?)
}

/// Gradient-based unlearning from `original`. Each epoch visits the forget
/// set once in a shuffled order; retain rows are drawn from a separate
/// shuffled stream so that forget-only methods see identical batches.
pub fn unlearn(
    original: &Checkpoint,
    cfg: &UnlearnMethodConfig,
    data: &UnlearnData,
    sched: &Schedule,
    seed: u64,
    guard: Option<&DivergenceGuard>,
) -> Result<UnlearnOutcome, HarnessError> {
    cfg.validate()?;
    sched.validate()?;
    if matches!(cfg.method, Method::TaskVector | Method::Whp) {
        return Err(HarnessError::InvalidConfig(format!(
            "{} is not trained by descent; use reinforce",
            cfg.method
        )));
    }
    if data.forget.is_empty() {
        return Err(HarnessError::MissingData("forget examples"));
    }
    let opt = AdamW::default();
    let mut ckpt = original.derive(crate::lm::Provenance::Unlearned);
    let mut out = UnlearnOutcome {
        checkpoint: ckpt.clone(),
        steps: 0,
        diverged_at: None,
        history: Vec::new(),
    };
    let n_retain = data.retain.len().max(1);
    let mut retain_cursor = 0usize;
    let mut retain_epoch = 0usize;
    let mut retain_order = epoch_order(n_retain, seed ^ 0x5eed, 0);
    let total = sched.epochs * data.forget.len().div_ceil(sched.batch_size);
    'epochs: for epoch in 0..sched.epochs {
        let order = epoch_order(data.forget.len(), seed, epoch);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(sched.batch_size) {
            let mut retain_idx = Vec::with_capacity(chunk.len());
            for _ in 0..chunk.len() {
                if retain_cursor == n_retain {
                    retain_epoch += 1;
                    retain_order = epoch_order(n_retain, seed ^ 0x5eed, retain_epoch);
                    retain_cursor = 0;
                }
                retain_idx.push(retain_order[retain_cursor]);
                retain_cursor += 1;
            }
            match descend_objective(
                &mut ckpt,
                original,
                cfg,
                data,
                chunk,
                &retain_idx,
                &opt,
                sched.lr_at(out.steps, total),
            ) {
                Ok(loss) => {
                    sum += loss;
                    n += 1;
                    out.steps += 1;
                }
                Err(HarnessError::Model(ModelError::NonFiniteLoss(_))) => {
                    out.diverged_at = Some(out.steps);
                    out.history.push(EpochLog {
                        epoch,
                        steps: out.steps,
                        mean_loss: f64::NAN,
                        retain_ppl: None,
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let retain_ppl = match guard {
            Some(g) => Some(perplexity(&ckpt, &g.retain)?),
            None => None,
        };
        out.history.push(EpochLog {
            epoch,
            steps: out.steps,
            mean_loss: sum / n.max(1) as f64,
            retain_ppl,
        });
        if let (Some(g), Some(p)) = (guard, retain_ppl) {
            if !(p <= g.max_ppl) {
                out.diverged_at = Some(out.steps);
                break;
            }
        }
    }
    out.checkpoint = ckpt;
    Ok(out)
}

/// Finetunes a copy of `original` further on the forget set.
pub fn reinforce(
    original: &Checkpoint,
    forget: &[Example],
    sched: &Schedule,
    seed: u64,
) -> Result<(Checkpoint, TrainStats), HarnessError> {
    let mut ck = original.derive(crate::lm::Provenance::Finetuned);
    let stats = finetune(&mut ck, forget, sched, seed, &AdamW::default())?;
    Ok((ck, stats))
}

/// `2θ_o − θ_reinforced` as an unlearned checkpoint.
pub fn task_vector(
    original: &Checkpoint,
    reinforced: &Checkpoint,
) -> Result<Checkpoint, HarnessError> {
    let theta = task_vector_unlearn(&original.theta, &reinforced.theta)?;
    Ok(Checkpoint::from_theta(
        original.config.clone(),
        theta,
        crate::lm::Provenance::Unlearned,
    )?)
}
