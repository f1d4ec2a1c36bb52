use super::*;
use crate::autodiff::finite_difference_check;
use crate::lm::{sft_loss, Checkpoint, Example, ModelConfig, Provenance, SequenceBatch};
use crate::smoothing::GradientBundle;

fn cfg(max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len,
        seed: 11,
    }
}

fn batch(rows: &[(&[usize], &[usize])]) -> SequenceBatch {
    let ex: Vec<Example> = rows
        .iter()
        .map(|(p, a)| Example::new(p.to_vec(), a.to_vec()))
        .collect();
    SequenceBatch::from_examples(&ex).unwrap()
}

struct Fixture {
    forget: SequenceBatch,
    retain: SequenceBatch,
    normals: Vec<SequenceBatch>,
    refusal: SequenceBatch,
    random: SequenceBatch,
}

fn fixture() -> Fixture {
    Fixture {
        forget: batch(&[(&[5, 6], &[7, 8]), (&[9], &[10, 11, 12])]),
        retain: batch(&[(&[4, 6], &[13, 14]), (&[12, 5], &[15])]),
        normals: vec![
            batch(&[(&[5, 6], &[4, 9]), (&[9], &[6, 6])]),
            batch(&[(&[5, 6], &[14]), (&[9], &[13, 4, 5])]),
        ],
        refusal: batch(&[(&[5, 6], &[3, 4]), (&[9], &[3, 4, 4])]),
        random: batch(&[(&[5, 6], &[11, 15]), (&[9], &[8])]),
    }
}

fn models() -> (Checkpoint, Checkpoint) {
    let a = Checkpoint::init_with_std(cfg(6), 0.5).unwrap();
    let b = Checkpoint::init_with_std(ModelConfig { seed: 12, ..cfg(6) }, 0.5).unwrap();
    let reference =
        Checkpoint::from_theta(a.config.clone(), b.theta, Provenance::Original).unwrap();
    (a, reference)
}

fn rel_close(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

#[test]
fn gls_worked_examples() {
    let a = gls_smooth(&[1.0, 0.0, 0.0], 0.3);
    for (x, y) in a.iter().zip([0.8, 0.1, 0.1]) {
        assert!((x - y).abs() <= 1e-12);
    }
    let b = gls_smooth(&[1.0, 0.0, 0.0], -0.3);
    for (x, y) in b.iter().zip([1.2, -0.1, -0.1]) {
        assert!((x - y).abs() <= 1e-12);
    }
    assert_eq!(gls_smooth(&[0.2, 0.5, 0.3], 0.0), vec![0.2, 0.5, 0.3]);
}

#[test]
fn sga_label_examples() {
    let l = sga_label(4, 0.4).unwrap();
    for (x, y) in l.signed.iter().zip([-0.7, -0.1, -0.1, -0.1]) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!((l.w_f - 0.7).abs() < 1e-12);
    assert!((l.w_p - 0.1).abs() < 1e-12);
    assert_eq!(l.w_f + 3.0 * l.w_p, 1.0);
    let ga = sga_label(2, 0.0).unwrap();
    assert_eq!((ga.w_f, ga.w_p), (1.0, 0.0));
    assert_eq!(ga.signed[0], -1.0);
    assert_eq!(ga.signed[1].abs(), 0.0);
    for (k, r) in [(2, 0.7), (5, -8.0), (7, 0.13)] {
        let s: f64 = sga_label(k, r).unwrap().signed.iter().sum();
        assert!((s + 1.0).abs() < 1e-12);
    }
    assert!(matches!(
        sga_label(1, 0.5),
        Err(ObjectiveError::InvalidK { k: 1, min: 2 })
    ));
}

#[test]
fn sga_at_zero_rate_is_gradient_ascent() {
    let (ck, _) = models();
    let f = fixture();
    let ga = gradient_ascent_loss(&ck, &f.forget).unwrap();
    let sga = sga_loss(
        &ck,
        &f.forget,
        &f.normals,
        &UnlearnMethodConfig::sga(0.0, 3),
    )
    .unwrap();
    assert_eq!(ga.value().to_bits(), sga.value().to_bits());
    assert_eq!(ga.gradient().unwrap(), sga.gradient().unwrap());
    let no_normals = sga_loss(&ck, &f.forget, &[], &UnlearnMethodConfig::sga(0.0, 3)).unwrap();
    assert_eq!(ga.value(), no_normals.value());
    assert!(matches!(
        sga_loss(&ck, &f.forget, &[], &UnlearnMethodConfig::sga(0.2, 3)),
        Err(ObjectiveError::NormalSetRequired)
    ));
}

#[test]
fn sga_weights_and_breakdown() {
    let (ck, _) = models();
    let f = fixture();
    let o = sga_loss(
        &ck,
        &f.forget,
        &f.normals[..1],
        &UnlearnMethodConfig::sga(1.0, 2),
    )
    .unwrap();
    let lf = -sft_loss(&ck, &f.forget).unwrap().value();
    let lp = sft_loss(&ck, &f.normals[0]).unwrap().value();
    assert!((o.value() - (0.5 * lf + 0.5 * lp)).abs() < 1e-12);
    assert!((o.breakdown.forget_term - lf).abs() < 1e-12);
    assert!((o.breakdown.per_normal_terms[0] - lp).abs() < 1e-12);
}

#[test]
fn sga_gradient_is_combination_of_term_gradients() {
    let (ck, _) = models();
    let f = fixture();
    for (r, k) in [(0.4, 3), (-0.8, 3), (2.0, 5)] {
        let cfg = UnlearnMethodConfig::sga(r, k);
        let o = sga_loss(&ck, &f.forget, &f.normals, &cfg).unwrap();
        let g = o.gradient().unwrap();
        let g_f: Vec<f64> = sft_loss(&ck, &f.forget)
            .unwrap()
            .gradient()
            .unwrap()
            .iter()
            .map(|x| -x)
            .collect();
        let g_p: Vec<Vec<f64>> = f
            .normals
            .iter()
            .map(|n| sft_loss(&ck, n).unwrap().gradient().unwrap())
            .collect();
        let bundle = GradientBundle::new(g_f, g_p, k).unwrap();
        let dir = sga_update_direction(&bundle, r);
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert!(rel_close(&dir, &neg) <= 1e-10);
    }
}

#[test]
fn update_direction_special_cases() {
    let b = GradientBundle::new(vec![1.0, -2.0], vec![vec![3.0, 4.0], vec![5.0, 6.0]], 3).unwrap();
    assert_eq!(sga_update_direction(&b, 0.0), vec![-1.0, 2.0]);
    let zero = GradientBundle::new(vec![1.0, -2.0], vec![vec![0.0; 2]; 2], 3).unwrap();
    let d = sga_update_direction(&zero, 0.6);
    let w = 1.0 - 0.6 + 0.2;
    assert!((d[0] + w).abs() < 1e-15 && (d[1] - 2.0 * w).abs() < 1e-15);
}

#[test]
fn gradient_ascent_examples() {
    let f = fixture();
    let uni = Checkpoint::uniform(cfg(6)).unwrap();
    assert!((gradient_ascent_loss(&uni, &f.forget).unwrap().value() + 16f64.ln()).abs() < 1e-12);
    let (mut ck, _) = models();
    let before = sft_loss(&ck, &f.forget).unwrap().value();
    let g = gradient_ascent_loss(&ck, &f.forget)
        .unwrap()
        .gradient()
        .unwrap();
    ck.theta
        .iter_mut()
        .zip(&g)
        .for_each(|(t, g)| *t -= 1e-3 * g);
    assert!(sft_loss(&ck, &f.forget).unwrap().value() > before);
}

#[test]
fn gradient_difference_examples() {
    let (ck, _) = models();
    let f = fixture();
    assert!(
        gradient_difference_loss(&ck, &f.forget, &f.forget, 1.0)
            .unwrap()
            .value()
            .abs()
            < 1e-15
    );
    let o = gradient_difference_loss(&ck, &f.forget, &f.retain, 1.0).unwrap();
    let oracle =
        sft_loss(&ck, &f.retain).unwrap().value() - sft_loss(&ck, &f.forget).unwrap().value();
    assert!((o.value() - oracle).abs() < 1e-12);
    assert!(gradient_difference_loss(&ck, &f.forget, &f.retain.masked_out(), 1.0).is_err());
}

/// `Σ_pos Σ_v p_ref log(p_ref / p_θ)` computed from raw logits.
fn kl_oracle(ck: &Checkpoint, reference: &Checkpoint, b: &SequenceBatch) -> f64 {
    let v = ck.config.vocab_size;
    let softmax = |row: &[f64]| {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let lq = crate::lm::supervised_logits(ck, b).unwrap();
    let lp = crate::lm::supervised_logits(reference, b).unwrap();
    let n = lq.len() / v;
    let mut total = 0.0;
    for i in 0..n {
        let p = softmax(&lp[i * v..(i + 1) * v]);
        let q = softmax(&lq[i * v..(i + 1) * v]);
        for j in 0..v {
            total += p[j] * (p[j] / q[j]).ln();
        }
    }
    total / n as f64
}

#[test]
fn kl_term_examples() {
    let (ck, reference) = models();
    let f = fixture();
    let same = kl_regularized_loss(&ck, &ck, &f.forget, &f.retain, 1.0).unwrap();
    assert!(same.breakdown.auxiliary_term.abs() < 1e-10);
    let o = kl_regularized_loss(&ck, &reference, &f.forget, &f.retain, 1.0).unwrap();
    assert!(o.breakdown.auxiliary_term > 0.0);
    assert!((o.breakdown.auxiliary_term - kl_oracle(&ck, &reference, &f.retain)).abs() < 1e-10);
    assert!((o.value() - (o.breakdown.forget_term + o.breakdown.auxiliary_term)).abs() < 1e-10);
    let other = Checkpoint::init(ModelConfig {
        d_model: 4,
        ..cfg(6)
    })
    .unwrap();
    assert!(matches!(
        kl_regularized_loss(&ck, &other, &f.forget, &f.retain, 1.0),
        Err(ObjectiveError::ConfigMismatch)
    ));
}

fn npo(beta: f64) -> UnlearnMethodConfig {
    UnlearnMethodConfig {
        beta,
        ..UnlearnMethodConfig::new(Method::Npo)
    }
}

#[test]
fn npo_closed_forms() {
    let f = fixture();
    let uni = Checkpoint::uniform(cfg(6)).unwrap();
    let log_sigmoid = |x: f64| -(1.0 + (-x).exp()).ln();
    for beta in [1.0, 0.1] {
        let o = preference_loss(
            PreferenceVariant::Npo,
            &uni,
            &npo(beta),
            ObjectiveInputs::new(&f.forget),
        )
        .unwrap();
        let oracle = -2.0 * beta * log_sigmoid(beta * 16f64.ln());
        assert!((o.value() - oracle).abs() < 1e-12);
    }
    // log h = 0 gives −2β·log σ(0) = 2β·ln 2.
    assert!((-2.0 * log_sigmoid(0.0) - 2.0 * 2f64.ln()).abs() < 1e-15);
    let vanishing = preference_loss(
        PreferenceVariant::Npo,
        &uni,
        &npo(12.0),
        ObjectiveInputs::new(&f.forget),
    )
    .unwrap();
    assert!(vanishing.value() < 1e-10);
    assert!(preference_loss(
        PreferenceVariant::Npo,
        &uni,
        &npo(0.0),
        ObjectiveInputs::new(&f.forget)
    )
    .is_err());
}

#[test]
fn dpo_at_reference_with_equal_answers() {
    let (ck, _) = models();
    let f = fixture();
    let beta = 0.7;
    let cfg = UnlearnMethodConfig {
        beta,
        ..UnlearnMethodConfig::new(Method::Dpo)
    };
    let inputs = ObjectiveInputs::new(&f.forget)
        .refusal(&f.forget)
        .reference(&ck);
    let o = preference_loss(PreferenceVariant::Dpo, &ck, &cfg, inputs).unwrap();
    assert!((o.value() - 2.0 * beta * 2f64.ln()).abs() < 1e-12);
    let missing = preference_loss(
        PreferenceVariant::Dpo,
        &ck,
        &cfg,
        ObjectiveInputs::new(&f.forget).refusal(&f.refusal),
    );
    assert!(matches!(
        missing,
        Err(ObjectiveError::MissingInput { method: "DPO", .. })
    ));
    let rt = preference_loss(PreferenceVariant::DpoRt, &ck, &cfg, inputs);
    assert!(matches!(
        rt,
        Err(ObjectiveError::MissingInput {
            method: "DPO-RT",
            ..
        })
    ));
}

#[test]
fn po_and_rt_variants_add_retain_loss() {
    let (ck, reference) = models();
    let f = fixture();
    let ce = |b: &SequenceBatch| sft_loss(&ck, b).unwrap().value();
    let po = preference_loss(
        PreferenceVariant::Po,
        &ck,
        &UnlearnMethodConfig::new(Method::Po),
        ObjectiveInputs::new(&f.forget)
            .refusal(&f.refusal)
            .retain(&f.retain),
    )
    .unwrap();
    assert!((po.value() - (ce(&f.refusal) + ce(&f.retain))).abs() < 1e-12);
    let inputs = ObjectiveInputs::new(&f.forget)
        .refusal(&f.refusal)
        .retain(&f.retain)
        .reference(&reference);
    for (plain, rt) in [
        (PreferenceVariant::Npo, PreferenceVariant::NpoRt),
        (PreferenceVariant::Dpo, PreferenceVariant::DpoRt),
    ] {
        let c = UnlearnMethodConfig {
            lambda: 0.5,
            ..UnlearnMethodConfig::new(Method::Npo)
        };
        let a = preference_loss(plain, &ck, &c, inputs).unwrap().value();
        let b = preference_loss(rt, &ck, &c, inputs).unwrap().value();
        assert!((b - a - 0.5 * ce(&f.retain)).abs() < 1e-12);
    }
}

#[test]
fn random_completion_examples() {
    let (ck, reference) = models();
    let f = fixture();
    let ce = |b: &SequenceBatch| sft_loss(&ck, b).unwrap().value();
    let mm = random_completion_loss(
        RandomVariant::Mismatch,
        &ck,
        &UnlearnMethodConfig::new(Method::Mismatch),
        ObjectiveInputs::new(&f.forget)
            .random(&f.retain)
            .retain(&f.retain),
    )
    .unwrap();
    assert!((mm.value() - 2.0 * ce(&f.retain)).abs() < 1e-12);

    let llmu = |eps: Option<[f64; 3]>, reference: &Checkpoint| {
        let c = UnlearnMethodConfig {
            epsilon: eps,
            ..UnlearnMethodConfig::new(Method::Llmu)
        };
        let inputs = ObjectiveInputs::new(&f.forget)
            .random(&f.random)
            .retain(&f.retain)
            .reference(reference);
        random_completion_loss(RandomVariant::Llmu, &ck, &c, inputs)
    };
    let isolated = llmu(Some([0.3, 0.0, 0.0]), &reference).unwrap();
    let ga = gradient_ascent_loss(&ck, &f.forget).unwrap();
    assert!((isolated.value() - 0.3 * ga.value()).abs() < 1e-12);
    let same = llmu(Some([0.3, 0.4, 2.0]), &ck).unwrap();
    assert!(same.breakdown.auxiliary_term.abs() < 1e-10);
    assert!((same.value() - (-0.3 * ce(&f.forget) + 0.4 * ce(&f.random))).abs() < 1e-10);
    assert!(matches!(
        llmu(None, &ck),
        Err(ObjectiveError::MissingInput { method: "LLMU", .. })
    ));
}

#[test]
fn flat_examples() {
    let (ck, _) = models();
    let f = fixture();
    let id = flat_loss(&ck, &f.forget, &f.forget, Divergence::Identity).unwrap();
    assert!(id.value().abs() < 1e-15);
    let uni = Checkpoint::uniform(cfg(6)).unwrap();
    let p: f64 = 1.0 / 16.0;
    let g = |t: f64| 2.0 * (t - 1.0);
    let fs = |u: f64| u * u / 4.0 + u;
    let pearson = flat_loss(&uni, &f.forget, &f.refusal, Divergence::Pearson).unwrap();
    assert!((pearson.value() - (-g(p) + fs(g(p)))).abs() < 1e-12);
    assert_eq!(-g(1.0) + fs(g(0.0)), -1.0);
    assert!(matches!(
        "hellinger".parse::<Divergence>(),
        Err(ObjectiveError::UnknownDivergence(_))
    ));
    assert!(flat_loss(
        &ck,
        &f.forget,
        &f.normals[0].masked_out(),
        Divergence::Pearson
    )
    .is_err());
}

#[test]
fn task_vector_examples() {
    let o = [0.5, -1.0, 2.0];
    assert_eq!(task_vector_unlearn(&o, &o).unwrap(), o.to_vec());
    assert_eq!(
        task_vector_unlearn(&[0.0; 3], &[1.0, -2.0, 0.5]).unwrap(),
        vec![-1.0, 2.0, -0.5]
    );
    assert_eq!(
        task_vector_unlearn(&o, &[1.0, 1.0, 1.0]).unwrap(),
        vec![0.0, -3.0, 3.0]
    );
    assert!(task_vector_unlearn(&o, &[1.0]).is_err());
}

#[test]
fn whp_examples() {
    let po = [0.2, 0.3, 0.5];
    assert_eq!(
        whp_distribution(&po, &[0.6, 0.2, 0.2], 0.0).unwrap(),
        po.to_vec()
    );
    assert_eq!(whp_distribution(&po, &po, 3.0).unwrap(), po.to_vec());
    let q = whp_distribution(&[0.5, 0.5], &[0.9, 0.1], 1.0).unwrap();
    assert!((q[0] - 0.1).abs() < 1e-15 && (q[1] - 0.9).abs() < 1e-15);
    let clipped = whp_distribution(&[0.5, 0.5], &[0.9, 0.1], 5.0).unwrap();
    assert_eq!(clipped, vec![0.0, 1.0]);
    assert!(whp_distribution(&[1.0, 0.0], &[0.0, 1.0], -1.0).is_ok());
    assert!(matches!(
        whp_distribution(&[0.5, 0.5], &[0.5, 0.5 + 1e-6], 1.0),
        Err(ObjectiveError::NotADistribution(_))
    ));
    assert!(whp_distribution(&[1.0, 0.0], &[0.0, 1.0], f64::INFINITY).is_err());
}

#[test]
fn method_config_validation_and_parsing() {
    assert!(UnlearnMethodConfig::sga(0.4, 1).validate().is_err());
    assert!(UnlearnMethodConfig {
        beta: 0.0,
        ..UnlearnMethodConfig::new(Method::Dpo)
    }
    .validate()
    .is_err());
    assert!(UnlearnMethodConfig::new(Method::Llmu).validate().is_err());
    assert_eq!(UnlearnMethodConfig::sga(0.0, 4).normal_count(), 3);
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    assert_eq!("dpo-rt".parse::<Method>().unwrap(), Method::DpoRt);
    assert!("sgd".parse::<Method>().is_err());
}

/// Relative finite-difference error of `loss` over the coordinates whose
/// analytic gradient is at least 1e-6 in magnitude. Central differences have
/// a roundoff floor near `ε·|L|/h ≈ 1e-10`, so relative errors below that
/// magnitude measure noise; this also skips the attention key bias, whose
/// gradient is identically zero.
fn fd_error(ck: &Checkpoint, loss: impl Fn(&Checkpoint) -> Objective) -> f64 {
    let g0 = loss(ck).gradient().unwrap();
    let free: Vec<usize> = (0..ck.theta.len())
        .filter(|&i| g0[i].abs() >= 1e-6)
        .collect();
    assert!(
        free.len() * 10 >= ck.theta.len() * 8,
        "{} of {} coordinates probed",
        free.len(),
        ck.theta.len()
    );
    let start: Vec<f64> = free.iter().map(|&i| ck.theta[i]).collect();
    finite_difference_check(
        |sub| {
            let mut c = ck.clone();
            for (&i, &v) in free.iter().zip(sub) {
                c.theta[i] = v;
            }
            let o = loss(&c);
            let g = o.gradient().unwrap();
            Ok((o.value(), free.iter().map(|&i| g[i]).collect()))
        },
        &start,
        1e-5,
    )
    .unwrap()
}

#[test]
fn every_objective_passes_finite_differences() {
    let (ck, reference) = models();
    let f = fixture();
    let mut cases: Vec<UnlearnMethodConfig> = Method::ALL
        .into_iter()
        .filter(|m| !matches!(m, Method::TaskVector | Method::Whp))
        .map(|m| UnlearnMethodConfig {
            r: 0.6,
            k: 3,
            beta: 0.8,
            lambda: 0.7,
            epsilon: Some([0.5, 0.3, 0.9]),
            ..UnlearnMethodConfig::new(m)
        })
        .collect();
    cases.push(UnlearnMethodConfig {
        divergence: Divergence::Kl,
        ..UnlearnMethodConfig::new(Method::Flat)
    });
    cases.push(UnlearnMethodConfig {
        reference_margin: false,
        beta: 0.5,
        ..UnlearnMethodConfig::new(Method::Dpo)
    });
    for c in &cases {
        let err = fd_error(&ck, |m| {
            let inputs = ObjectiveInputs::new(&f.forget)
                .retain(&f.retain)
                .normals(&f.normals)
                .refusal(&f.refusal)
                .random(&f.random)
                .reference(&reference);
            method_loss(m, c, inputs).unwrap()
        });
        assert!(err < 1e-4, "{} relative error {err}", c.method);
    }
}
