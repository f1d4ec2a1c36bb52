use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::lm::{
    supervised_log_probs, supervised_logits, target_log_probs, Checkpoint, LossGraph, ParamVars,
    SequenceBatch,
};

use super::config::{Divergence, Method, UnlearnMethodConfig};
use super::label::sga_label;
use super::ObjectiveError;

/// Scalar components of an objective.
///
/// How they combine depends on the method; see each loss function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub forget_term: f64,
    pub auxiliary_term: f64,
    pub per_normal_terms: Vec<f64>,
}

/// A differentiable objective and its components.
#[derive(Debug)]
pub struct Objective {
    pub graph: LossGraph,
    pub breakdown: LossBreakdown,
}

impl Objective {
    pub fn value(&self) -> f64 {
        self.graph.value()
    }

    pub fn gradient(&self) -> Result<Vec<f64>, ObjectiveError> {
        Ok(self.graph.gradient()?)
    }
}

/// Batches an objective may draw on. Rows of `refusal` (also the FLAT
/// template) and `random` pair with forget rows where a method requires it.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    pub forget: &'a SequenceBatch,
    pub retain: Option<&'a SequenceBatch>,
    pub normals: &'a [SequenceBatch],
    pub refusal: Option<&'a SequenceBatch>,
    pub random: Option<&'a SequenceBatch>,
    pub reference: Option<&'a Checkpoint>,
}

impl<'a> ObjectiveInputs<'a> {
    pub fn new(forget: &'a SequenceBatch) -> Self {
        Self {
            forget,
            retain: None,
            normals: &[],
            refusal: None,
            random: None,
            reference: None,
        }
    }

    pub fn retain(mut self, b: &'a SequenceBatch) -> Self {
        self.retain = Some(b);
        self
    }

    pub fn normals(mut self, b: &'a [SequenceBatch]) -> Self {
        self.normals = b;
        self
    }

    pub fn refusal(mut self, b: &'a SequenceBatch) -> Self {
        self.refusal = Some(b);
        self
    }

    pub fn random(mut self, b: &'a SequenceBatch) -> Self {
        self.random = Some(b);
        self
    }

    pub fn reference(mut self, c: &'a Checkpoint) -> Self {
        self.reference = Some(c);
        self
    }
}

fn need<T>(v: Option<T>, method: &'static str, what: &'static str) -> Result<T, ObjectiveError> {
    v.ok_or(ObjectiveError::MissingInput { method, what })
}

struct Builder<'c> {
    ckpt: &'c Checkpoint,
    tape: Tape,
    params: ParamVars,
}

impl<'c> Builder<'c> {
    fn new(ckpt: &'c Checkpoint) -> Result<Self, ObjectiveError> {
        let mut tape = Tape::new();
        let params = ParamVars::load(&mut tape, ckpt, true)?;
        Ok(Self { ckpt, tape, params })
    }

    fn val(&self, v: Var) -> f64 {
        self.tape.scalar(v)
    }

    /// Mean masked cross-entropy.
    fn ce(&mut self, batch: &SequenceBatch) -> Result<Var, ObjectiveError> {
        let t = target_log_probs(&mut self.tape, &self.ckpt.config, &self.params, batch)?;
        let m = t.positions.len();
        Ok(self
            .tape
            .weighted_sum(t.log_probs, &vec![-1.0 / m as f64; m])?)
    }

    /// Negated mean masked cross-entropy, `L_f`.
    fn neg_ce(&mut self, batch: &SequenceBatch) -> Result<Var, ObjectiveError> {
        let t = target_log_probs(&mut self.tape, &self.ckpt.config, &self.params, batch)?;
        let m = t.positions.len();
        Ok(self
            .tape
            .weighted_sum(t.log_probs, &vec![1.0 / m as f64; m])?)
    }

    /// `[rows]` mean per-token log-probability of each row's supervised tokens.
    fn row_mean_log_prob(&mut self, batch: &SequenceBatch) -> Result<Var, ObjectiveError> {
        let t = target_log_probs(&mut self.tape, &self.ckpt.config, &self.params, batch)?;
        check_rows_supervised(&t.rows, batch.rows())?;
        Ok(self
            .tape
            .segment_sum(t.log_probs, &t.row_mean_segments(batch.rows()))?)
    }

    /// `[rows]` mean per-token probability of each row's supervised tokens.
    fn row_mean_prob(&mut self, batch: &SequenceBatch) -> Result<Var, ObjectiveError> {
        let t = target_log_probs(&mut self.tape, &self.ckpt.config, &self.params, batch)?;
        check_rows_supervised(&t.rows, batch.rows())?;
        let p = self.tape.exp(t.log_probs);
        Ok(self
            .tape
            .segment_sum(p, &t.row_mean_segments(batch.rows()))?)
    }

    /// Mean over supervised positions of `KL(h_ref ‖ h_θ)`.
    fn kl(&mut self, reference: &Checkpoint, batch: &SequenceBatch) -> Result<Var, ObjectiveError> {
        if reference.config != self.ckpt.config {
            return Err(ObjectiveError::ConfigMismatch);
        }
        let t = target_log_probs(&mut self.tape, &self.ckpt.config, &self.params, batch)?;
        let ref_logits = supervised_logits(reference, batch)?;
        let v = self.ckpt.config.vocab_size;
        let m = t.positions.len();
        let mut p_ref = vec![0.0; ref_logits.len()];
        let mut entropy_term = 0.0;
        for (row, out) in ref_logits.chunks(v).zip(p_ref.chunks_mut(v)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (o, x) in out.iter_mut().zip(row) {
                let lp = x - lse;
                *o = lp.exp();
                entropy_term += *o * lp;
            }
        }
        let cross = self
            .tape
            .soft_cross_entropy(t.logits, &p_ref, &vec![1.0 / m as f64; m])?;
        Ok(self.tape.add_scalar(cross, entropy_term / m as f64))
    }

    /// `Σ c_i · v_i` over scalar nodes.
    fn lin(&mut self, terms: &[(Var, f64)]) -> Result<Var, ObjectiveError> {
        let mut acc = self.tape.scale(terms[0].0, terms[0].1);
        for &(v, c) in &terms[1..] {
            let s = self.tape.scale(v, c);
            acc = self.tape.add(acc, s)?;
        }
        Ok(acc)
    }

    fn mean(&mut self, v: Var) -> Result<Var, ObjectiveError> {
        let n = self.tape.value(v).len();
        Ok(self.tape.weighted_sum(v, &vec![1.0 / n as f64; n])?)
    }

    fn finish(self, loss: Var, forget: f64, aux: f64, normals: Vec<f64>) -> Objective {
        let breakdown = LossBreakdown {
            total: self.tape.scalar(loss),
            forget_term: forget,
            auxiliary_term: aux,
            per_normal_terms: normals,
        };
        Objective {
            graph: LossGraph {
                tape: self.tape,
                params: self.params,
                loss,
            },
            breakdown,
        }
    }
}

fn check_rows_supervised(rows: &[usize], n: usize) -> Result<(), ObjectiveError> {
    let mut seen = vec![false; n];
    rows.iter().for_each(|&r| seen[r] = true);
    if seen.iter().all(|s| *s) {
        Ok(())
    } else {
        Err(crate::lm::ModelError::NoSupervisedPositions.into())
    }
}

fn check_aligned(a: &SequenceBatch, b: &SequenceBatch) -> Result<(), ObjectiveError> {
    if a.rows() != b.rows() {
        return Err(ObjectiveError::Misaligned(a.rows(), b.rows()));
    }
    Ok(())
}

/// `total = −CE(forget)`.
pub fn gradient_ascent_loss(
    ckpt: &Checkpoint,
    forget: &SequenceBatch,
) -> Result<Objective, ObjectiveError> {
    let mut b = Builder::new(ckpt)?;
    let lf = b.neg_ce(forget)?;
    let v = b.val(lf);
    Ok(b.finish(lf, v, 0.0, Vec::new()))
}

/// `total = w_f·L_f + w_p·Σ_k L_p^(k)` with `L_f = −CE(forget)`,
/// `L_p^(k) = CE(normal k)` and `(w_f, w_p) = (1 − r + r/K, r/K)`.
///
/// `auxiliary_term` is `Σ_k L_p^(k)`.
pub fn sga_loss(
    ckpt: &Checkpoint,
    forget: &SequenceBatch,
    normals: &[SequenceBatch],
    cfg: &UnlearnMethodConfig,
) -> Result<Objective, ObjectiveError> {
    let label = sga_label(cfg.k, cfg.r)?;
    if normals.is_empty() && cfg.r != 0.0 {
        return Err(ObjectiveError::NormalSetRequired);
    }
    let mut b = Builder::new(ckpt)?;
    let lf = b.neg_ce(forget)?;
    let mut terms = vec![(lf, label.w_f)];
    let mut per_normal = Vec::with_capacity(normals.len());
    for n in normals {
        let lp = b.ce(n)?;
        per_normal.push(b.val(lp));
        terms.push((lp, label.w_p));
    }
    let total = b.lin(&terms)?;
    let f = b.val(lf);
    let aux = per_normal.iter().sum();
    Ok(b.finish(total, f, aux, per_normal))
}

/// `total = −CE(forget) + λ·CE(retain)`.
pub fn gradient_difference_loss(
    ckpt: &Checkpoint,
    forget: &SequenceBatch,
    retain: &SequenceBatch,
    lambda: f64,
) -> Result<Objective, ObjectiveError> {
    let mut b = Builder::new(ckpt)?;
    let lf = b.neg_ce(forget)?;
    let lr = b.ce(retain)?;
    let total = b.lin(&[(lf, 1.0), (lr, lambda)])?;
    let (f, a) = (b.val(lf), b.val(lr));
    Ok(b.finish(total, f, a, Vec::new()))
}

/// `total = −CE(forget) + λ·KL(h_ref ‖ h_θ)` averaged over retain positions.
pub fn kl_regularized_loss(
    ckpt: &Checkpoint,
    reference: &Checkpoint,
    forget: &SequenceBatch,
    retain: &SequenceBatch,
    lambda: f64,
) -> Result<Objective, ObjectiveError> {
    let mut b = Builder::new(ckpt)?;
    let lf = b.neg_ce(forget)?;
    let kl = b.kl(reference, retain)?;
    let total = b.lin(&[(lf, 1.0), (kl, lambda)])?;
    let (f, a) = (b.val(lf), b.val(kl));
    Ok(b.finish(total, f, a, Vec::new()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreferenceVariant {
    Po,
    Dpo,
    DpoRt,
    Npo,
    NpoRt,
}

impl PreferenceVariant {
    fn name(self) -> &'static str {
        match self {
            PreferenceVariant::Po => "PO",
            PreferenceVariant::Dpo => "DPO",
            PreferenceVariant::DpoRt => "DPO-RT",
            PreferenceVariant::Npo => "NPO",
            PreferenceVariant::NpoRt => "NPO-RT",
        }
    }
}

/// Refusal-preference objectives. `forget_term` is the preference part,
/// `auxiliary_term` the retain cross-entropy when one is used.
///
/// - PO: `CE(refusal) + CE(retain)`.
/// - DPO: `−2β·mean log σ(β·log h(y_e) − β·log h(y_f) − M_ref)`, with
///   `M_ref = β(log h_ref(y_e) − log h_ref(y_f))` or zero.
/// - NPO: `−2β·mean log σ(−β·log h(y_f))`.
/// - `-RT` variants add `λ·CE(retain)`.
///
/// `log h` is the mean per-token log-probability of a row.
pub fn preference_loss(
    variant: PreferenceVariant,
    ckpt: &Checkpoint,
    cfg: &UnlearnMethodConfig,
    inputs: ObjectiveInputs<'_>,
) -> Result<Objective, ObjectiveError> {
    let name = variant.name();
    let beta = cfg.beta;
    if variant != PreferenceVariant::Po && !(beta > 0.0 && beta.is_finite()) {
        return Err(ObjectiveError::InvalidConfig(format!(
            "beta must be positive for {name}, got {beta}"
        )));
    }
    let mut b = Builder::new(ckpt)?;
    let (pref, retain_weight) = match variant {
        PreferenceVariant::Po => {
            let refusal = need(inputs.refusal, name, "a refusal batch")?;
            let retain = need(inputs.retain, name, "a retain batch")?;
            let t = b.ce(refusal)?;
            let r = b.ce(retain)?;
            (t, Some((r, 1.0)))
        }
        PreferenceVariant::Dpo | PreferenceVariant::DpoRt => {
            let refusal = need(inputs.refusal, name, "a refusal batch")?;
            let reference = need(inputs.reference, name, "a reference checkpoint")?;
            if reference.config != ckpt.config {
                return Err(ObjectiveError::ConfigMismatch);
            }
            check_aligned(inputs.forget, refusal)?;
            let margin = if cfg.reference_margin {
                let e = row_means(&supervised_log_probs(reference, refusal)?);
                let f = row_means(&supervised_log_probs(reference, inputs.forget)?);
                e.iter().zip(&f).map(|(e, f)| beta * (e - f)).collect()
            } else {
                vec![0.0; refusal.rows()]
            };
            let le = b.row_mean_log_prob(refusal)?;
            let lf = b.row_mean_log_prob(inputs.forget)?;
            let diff = b.tape.sub(le, lf)?;
            let diff = b.tape.scale(diff, beta);
            let neg_margin = b
                .tape
                .constant(Tensor::vector(margin.iter().map(|m| -m).collect())?);
            let inner = b.tape.add(diff, neg_margin)?;
            let ls = b.tape.log_sigmoid(inner);
            let mean = b.mean(ls)?;
            let pref = b.tape.scale(mean, -2.0 * beta);
            let rt = if variant == PreferenceVariant::DpoRt {
                let retain = need(inputs.retain, name, "a retain batch")?;
                Some((b.ce(retain)?, cfg.lambda))
            } else {
                None
            };
            (pref, rt)
        }
        PreferenceVariant::Npo | PreferenceVariant::NpoRt => {
            let lf = b.row_mean_log_prob(inputs.forget)?;
            let inner = b.tape.scale(lf, -beta);
            let ls = b.tape.log_sigmoid(inner);
            let mean = b.mean(ls)?;
            let pref = b.tape.scale(mean, -2.0 * beta);
            let rt = if variant == PreferenceVariant::NpoRt {
                let retain = need(inputs.retain, name, "a retain batch")?;
                Some((b.ce(retain)?, cfg.lambda))
            } else {
                None
            };
            (pref, rt)
        }
    };
    let p = b.val(pref);
    match retain_weight {
        Some((r, w)) => {
            let total = b.lin(&[(pref, 1.0), (r, w)])?;
            let a = b.val(r);
            Ok(b.finish(total, p, a, Vec::new()))
        }
        None => Ok(b.finish(pref, p, 0.0, Vec::new())),
    }
}

fn row_means(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomVariant {
    Mismatch,
    Llmu,
}

/// Random-completion objectives.
///
/// - Mismatch: `CE(retain) + CE(random)`; `forget_term` is `CE(random)`,
///   `auxiliary_term` is `CE(retain)`.
/// - LLMU: `ε₁·L_f + ε₂·CE(random) + ε₃·KL(h_ref ‖ h_θ)` on retain, with
///   `forget_term = L_f = −CE(forget)`, `auxiliary_term` the KL and
///   `per_normal_terms = [CE(random)]`.
pub fn random_completion_loss(
    variant: RandomVariant,
    ckpt: &Checkpoint,
    cfg: &UnlearnMethodConfig,
    inputs: ObjectiveInputs<'_>,
) -> Result<Objective, ObjectiveError> {
    let mut b = Builder::new(ckpt)?;
    match variant {
        RandomVariant::Mismatch => {
            let random = need(inputs.random, "Mismatch", "a random-completion batch")?;
            let retain = need(inputs.retain, "Mismatch", "a retain batch")?;
            let lr = b.ce(retain)?;
            let lx = b.ce(random)?;
            let total = b.lin(&[(lr, 1.0), (lx, 1.0)])?;
            let (f, a) = (b.val(lx), b.val(lr));
            Ok(b.finish(total, f, a, Vec::new()))
        }
        RandomVariant::Llmu => {
            let [e1, e2, e3] = need(cfg.epsilon, "LLMU", "epsilon weights")?;
            let random = need(inputs.random, "LLMU", "a random-completion batch")?;
            let retain = need(inputs.retain, "LLMU", "a retain batch")?;
            let reference = need(inputs.reference, "LLMU", "a reference checkpoint")?;
            let lf = b.neg_ce(inputs.forget)?;
            let lx = b.ce(random)?;
            let kl = b.kl(reference, retain)?;
            let total = b.lin(&[(lf, e1), (lx, e2), (kl, e3)])?;
            let (f, x, a) = (b.val(lf), b.val(lx), b.val(kl));
            Ok(b.finish(total, f, a, vec![x]))
        }
    }
}

/// `mean_rows[−g*(P(y_e)) + f*(g*(P(y_f)))]` where `P` is the mean
/// per-token probability of a row. `forget_term` is the `f*` part and
/// `auxiliary_term` the `−g*` part.
pub fn flat_loss(
    ckpt: &Checkpoint,
    forget: &SequenceBatch,
    template: &SequenceBatch,
    divergence: Divergence,
) -> Result<Objective, ObjectiveError> {
    check_aligned(forget, template)?;
    let mut b = Builder::new(ckpt)?;
    let pe = b.row_mean_prob(template)?;
    let pf = b.row_mean_prob(forget)?;
    let ge = g_star(&mut b.tape, pe, divergence)?;
    let gf = g_star(&mut b.tape, pf, divergence)?;
    let ff = f_star(&mut b.tape, gf, divergence)?;
    let aux = b.mean(ge)?;
    let aux = b.tape.neg(aux);
    let fterm = b.mean(ff)?;
    let total = b.lin(&[(aux, 1.0), (fterm, 1.0)])?;
    let (f, a) = (b.val(fterm), b.val(aux));
    Ok(b.finish(total, f, a, Vec::new()))
}

fn g_star(tape: &mut Tape, t: Var, d: Divergence) -> Result<Var, ObjectiveError> {
    Ok(match d {
        Divergence::Pearson => {
            let s = tape.scale(t, 2.0);
            tape.add_scalar(s, -2.0)
        }
        Divergence::Kl => {
            let l = tape.log(t);
            tape.add_scalar(l, 1.0)
        }
        Divergence::Identity => t,
    })
}

fn f_star(tape: &mut Tape, u: Var, d: Divergence) -> Result<Var, ObjectiveError> {
    Ok(match d {
        Divergence::Pearson => {
            let sq = tape.mul(u, u)?;
            let q = tape.scale(sq, 0.25);
            tape.add(q, u)?
        }
        Divergence::Kl => {
            let s = tape.add_scalar(u, -1.0);
            tape.exp(s)
        }
        Divergence::Identity => u,
    })
}

/// Builds the objective selected by `cfg.method`.
pub fn method_loss(
    ckpt: &Checkpoint,
    cfg: &UnlearnMethodConfig,
    inputs: ObjectiveInputs<'_>,
) -> Result<Objective, ObjectiveError> {
    cfg.validate()?;
    let name = cfg.method.name();
    match cfg.method {
        Method::Sga => sga_loss(ckpt, inputs.forget, inputs.normals, cfg),
        Method::Ga => gradient_ascent_loss(ckpt, inputs.forget),
        Method::Gd => gradient_difference_loss(
            ckpt,
            inputs.forget,
            need(inputs.retain, name, "a retain batch")?,
            cfg.lambda,
        ),
        Method::Kl => kl_regularized_loss(
            ckpt,
            need(inputs.reference, name, "a reference checkpoint")?,
            inputs.forget,
            need(inputs.retain, name, "a retain batch")?,
            cfg.lambda,
        ),
        Method::Po => preference_loss(PreferenceVariant::Po, ckpt, cfg, inputs),
        Method::Dpo => preference_loss(PreferenceVariant::Dpo, ckpt, cfg, inputs),
        Method::DpoRt => preference_loss(PreferenceVariant::DpoRt, ckpt, cfg, inputs),
        Method::Npo => preference_loss(PreferenceVariant::Npo, ckpt, cfg, inputs),
        Method::NpoRt => preference_loss(PreferenceVariant::NpoRt, ckpt, cfg, inputs),
        Method::Mismatch => random_completion_loss(RandomVariant::Mismatch, ckpt, cfg, inputs),
        Method::Llmu => random_completion_loss(RandomVariant::Llmu, ckpt, cfg, inputs),
        Method::Flat => flat_loss(
            ckpt,
            inputs.forget,
            need(inputs.refusal, name, "a template batch")?,
            cfg.divergence,
        ),
        Method::TaskVector | Method::Whp => Err(ObjectiveError::NotALoss(name)),
    }
}
