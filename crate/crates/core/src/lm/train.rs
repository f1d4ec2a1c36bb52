use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};

use super::model::{mean_cross_entropy, ParamVars};
use super::{AdamMoments, Checkpoint, ModelError, SequenceBatch};

/// A scalar loss recorded on a tape together with the checkpoint's
/// parameter leaves.
#[derive(Debug)]
pub struct LossGraph {
    pub tape: Tape,
    pub params: ParamVars,
    pub loss: Var,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.loss)
    }

    /// Gradient of the loss in canonical parameter order.
    pub fn gradient(&self) -> Result<Vec<f64>, ModelError> {
        let grads = self.tape.backward_scalar(self.loss)?;
        Ok(self.params.flatten(&grads))
    }
}

/// Mean masked next-token cross-entropy of `batch` under `ckpt`.
pub fn sft_loss(ckpt: &Checkpoint, batch: &SequenceBatch) -> Result<LossGraph, ModelError> {
    let mut tape = Tape::new();
    let params = ParamVars::load(&mut tape, ckpt, true)?;
    let loss = mean_cross_entropy(&mut tape, &ckpt.config, &params, batch)?;
    Ok(LossGraph { tape, params, loss })
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    /// One update of `ckpt` along `grad`; increments the step count.
    pub fn step(&self, ckpt: &mut Checkpoint, grad: &[f64], lr: f64) -> Result<(), ModelError> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(ModelError::InvalidLearningRate(lr));
        }
        let n = ckpt.theta.len();
        if grad.len() != n {
            return Err(ModelError::ParamCount {
                expected: n,
                got: grad.len(),
            });
        }
        let moments = ckpt.moments.get_or_insert_with(|| AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let t = (ckpt.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..n {
            let g = grad[i];
            let m = self.beta1 * moments.m[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * moments.v[i] + (1.0 - self.beta2) * g * g;
            moments.m[i] = m;
            moments.v[i] = v;
            let update =
                (m / bc1) / ((v / bc2).sqrt() + self.eps) + self.weight_decay * ckpt.theta[i];
            ckpt.theta[i] -= lr * update;
        }
        ckpt.step += 1;
        Ok(())
    }
}

/// Evaluates `graph`, rejects non-finite losses, and applies one AdamW step.
/// Returns the loss before the update.
pub fn descend(
    ckpt: &mut Checkpoint,
    graph: &LossGraph,
    lr: f64,
    opt: &AdamW,
) -> Result<f64, ModelError> {
    let loss = graph.value();
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss(loss));
    }
    let grad = graph.gradient()?;
    opt.step(ckpt, &grad, lr)?;
    Ok(loss)
}

/// One AdamW step on the supervised fine-tuning loss.
pub fn train_step(
    ckpt: &mut Checkpoint,
    batch: &SequenceBatch,
    lr: f64,
) -> Result<f64, ModelError> {
    let graph = sft_loss(ckpt, batch)?;
    descend(ckpt, &graph, lr, &AdamW::default())
}
