//! Pre-norm causal transformer forward pass recorded on a [`Tape`].
//!
//! token embedding + learned positions, `n_layers` blocks of
//! `x + attn(ln1(x))` then `x + mlp(ln2(x))`, final layer norm, and an output
//! projection tied to the token embedding.

use crate::autodiff::{Gradients, Tape, Tensor, Var};

use super::checkpoint::{param_layout, PER_LAYER};
use super::{Checkpoint, ModelConfig, ModelError, SequenceBatch};

/// Parameter tensors of one checkpoint, loaded as tape leaves in canonical order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    lens: Vec<usize>,
}

impl ParamVars {
    pub fn load(
        tape: &mut Tape,
        ckpt: &Checkpoint,
        requires_grad: bool,
    ) -> Result<Self, ModelError> {
        ckpt.validate()?;
        let layout = param_layout(&ckpt.config);
        let mut vars = Vec::with_capacity(layout.len());
        let mut lens = Vec::with_capacity(layout.len());
        for spec in &layout {
            let t = Tensor::new(spec.shape.clone(), ckpt.theta[spec.range()].to_vec())?;
            vars.push(tape.leaf(t, requires_grad));
            lens.push(spec.len());
        }
        Ok(Self { vars, lens })
    }

    /// Flattens leaf gradients in canonical order; untouched tensors are zero.
    pub fn flatten(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.lens.iter().sum());
        for (&v, &len) in self.vars.iter().zip(&self.lens) {
            match grads.get(v) {
                Some(g) => out.extend_from_slice(g),
                None => out.resize(out.len() + len, 0.0),
            }
        }
        out
    }

    fn wte(&self) -> Var {
        self.vars[0]
    }

    fn wpe(&self) -> Var {
        self.vars[1]
    }

    fn layer(&self, l: usize, k: usize) -> Var {
        self.vars[2 + l * PER_LAYER + k]
    }

    fn ln_f(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// Final-layer-norm hidden states `[rows * seq_len, d]`.
pub fn hidden_states(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pv: &ParamVars,
    inputs: &[usize],
    rows: usize,
    seq_len: usize,
) -> Result<Var, ModelError> {
    if seq_len > cfg.max_seq_len {
        return Err(ModelError::ContextOverflow {
            len: seq_len,
            max: cfg.max_seq_len,
        });
    }
    if inputs.len() != rows * seq_len || inputs.is_empty() {
        return Err(ModelError::InvalidBatch(format!(
            "{} input ids for {rows} rows of length {seq_len}",
            inputs.len()
        )));
    }
    if let Some(&bad) = inputs.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: bad,
            vocab: cfg.vocab_size,
        });
    }
    let positions: Vec<usize> = (0..rows * seq_len).map(|i| i % seq_len).collect();
    let tok = tape.gather_rows(pv.wte(), inputs)?;
    let pos = tape.gather_rows(pv.wpe(), &positions)?;
    let mut x = tape.add(tok, pos)?;
    for l in 0..cfg.n_layers {
        let p = |k| pv.layer(l, k);
        let h = tape.layer_norm(x, p(0), p(1))?;
        let qkv = tape.matmul(h, p(2))?;
        let qkv = tape.add_row(qkv, p(3))?;
        let att = tape.causal_attention(qkv, seq_len, cfg.n_heads)?;
        let att = tape.matmul(att, p(4))?;
        let att = tape.add_row(att, p(5))?;
        x = tape.add(x, att)?;
        let h = tape.layer_norm(x, p(6), p(7))?;
        let h = tape.matmul(h, p(8))?;
        let h = tape.add_row(h, p(9))?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, p(10))?;
        let h = tape.add_row(h, p(11))?;
        x = tape.add(x, h)?;
    }
    let (g, b) = pv.ln_f();
    Ok(tape.layer_norm(x, g, b)?)
}

/// Logits `[positions.len(), V]` at the given flat positions of `hidden`.
pub fn logits_at(
    tape: &mut Tape,
    pv: &ParamVars,
    hidden: Var,
    positions: &[usize],
) -> Result<Var, ModelError> {
    let h = tape.gather_rows(hidden, positions)?;
    Ok(tape.matmul_nt(h, pv.wte())?)
}

/// Log-probabilities of the supervised targets of a batch.
#[derive(Debug, Clone)]
pub struct TargetLogProbs {
    /// `[M]` log p(target) at each supervised position.
    pub log_probs: Var,
    /// `[M, V]` logits at the same positions.
    pub logits: Var,
    /// Flat batch index of each supervised position.
    pub positions: Vec<usize>,
    /// Batch row of each supervised position.
    pub rows: Vec<usize>,
}

impl TargetLogProbs {
    /// Per-row segments weighting each supervised token by `1/len(row)`,
    /// so a segment sum gives the mean token log-probability of each row.
    pub fn row_mean_segments(&self, n_rows: usize) -> Vec<Vec<(usize, f64)>> {
        let mut segs: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
        for (i, &r) in self.rows.iter().enumerate() {
            segs[r].push((i, 1.0));
        }
        for s in &mut segs {
            let n = s.len() as f64;
            s.iter_mut().for_each(|e| e.1 = 1.0 / n);
        }
        segs
    }
}

pub fn target_log_probs(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pv: &ParamVars,
    batch: &SequenceBatch,
) -> Result<TargetLogProbs, ModelError> {
    let positions = batch.supervised_positions();
    if positions.is_empty() {
        return Err(ModelError::NoSupervisedPositions);
    }
    if let Some(&bad) = batch.targets().iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: bad,
            vocab: cfg.vocab_size,
        });
    }
    let hidden = hidden_states(tape, cfg, pv, batch.inputs(), batch.rows(), batch.seq_len())?;
    let logits = logits_at(tape, pv, hidden, &positions)?;
    let targets: Vec<usize> = positions.iter().map(|&p| batch.targets()[p]).collect();
    let log_probs = tape.pick_log_prob(logits, &targets)?;
    let rows = positions.iter().map(|&p| p / batch.seq_len()).collect();
    Ok(TargetLogProbs {
        log_probs,
        logits,
        positions,
        rows,
    })
}

/// Mean masked next-token cross-entropy as a scalar tape node.
pub fn mean_cross_entropy(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pv: &ParamVars,
    batch: &SequenceBatch,
) -> Result<Var, ModelError> {
    let t = target_log_probs(tape, cfg, pv, batch)?;
    let m = t.positions.len();
    Ok(tape.weighted_sum(t.log_probs, &vec![-1.0 / m as f64; m])?)
}
