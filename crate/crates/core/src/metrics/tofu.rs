use serde::{Deserialize, Serialize};

use super::MetricError;

/// Correct-answer normalized probability over the summed perturbed ones.
pub fn answer_probability_ratio(correct: f64, perturbed: &[f64]) -> Result<f64, MetricError> {
    if perturbed.is_empty() {
        return Err(MetricError::EmptySample("perturbed answers"));
    }
    let denom: f64 = perturbed.iter().sum();
    if !(denom > 0.0) {
        return Err(MetricError::ZeroDenominator("perturbed probabilities"));
    }
    Ok(correct / denom)
}

/// Geometric mean of the perturbed normalized probabilities over the
/// paraphrase's normalized probability.
pub fn truth_ratio(perturbed: &[f64], paraphrase: f64) -> Result<f64, MetricError> {
    if perturbed.is_empty() {
        return Err(MetricError::EmptySample("perturbed answers"));
    }
    if !(paraphrase > 0.0) {
        return Err(MetricError::ZeroDenominator("paraphrase probability"));
    }
    let mean_log = perturbed.iter().map(|p| p.ln()).sum::<f64>() / perturbed.len() as f64;
    Ok(mean_log.exp() / paraphrase)
}

/// Utility-side score of a truth ratio: `max(0, 1 − R)`.
pub fn truth_score(ratio: f64) -> f64 {
    (1.0 - ratio).max(0.0)
}

/// Harmonic mean of the nine utility scores.
pub fn model_utility(scores: &[f64]) -> Result<f64, MetricError> {
    if scores.len() != 9 {
        return Err(MetricError::InvalidInput(format!(
            "model utility needs 9 scores, got {}",
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(MetricError::OutOfRange(*bad));
    }
    if scores.contains(&0.0) {
        return Ok(0.0);
    }
    Ok(scores.len() as f64 / scores.iter().map(|s| 1.0 / s).sum::<f64>())
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptySample("KS sample"));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(MetricError::InvalidInput("KS sample contains NaN".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// `Q(λ) = P(K > λ)` for the Kolmogorov distribution. Large `λ` uses the
/// alternating series truncated at 100 terms; small `λ` uses the
/// complementary theta-function series, which converges there quickly.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if !(lambda > 0.0) {
        return 1.0;
    }
    let q = if lambda < 1.0 {
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let mut cdf = 0.0;
        for k in 1..=100 {
            let odd = (2 * k - 1) as f64;
            let term = (c * odd * odd).exp();
            cdf += term;
            if term < 1e-300 {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * cdf
    } else {
        let mut s = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            s += sign * (-2.0 * kf * kf * lambda * lambda).exp();
        }
        2.0 * s
    };
    q.clamp(0.0, 1.0)
}

pub fn ks_test(a: &[f64], b: &[f64]) -> Result<KsTest, MetricError> {
    let d = ks_statistic(a, b)?;
    let (n, m) = (a.len() as f64, b.len() as f64);
    let lambda = d * (n * m / (n + m)).sqrt();
    Ok(KsTest {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    })
}

/// KS p-value between the unlearned and retained models' truth ratios.
pub fn forget_quality(unlearned: &[f64], retained: &[f64]) -> Result<f64, MetricError> {
    Ok(ks_test(unlearned, retained)?.p_value)
}

/// `|BLEU_u − BLEU_ret| + |ROUGE_u − ROUGE_ret|` from `(BLEU, ROUGE-L)` pairs.
pub fn fq_gap(unlearned: (f64, f64), retained: (f64, f64)) -> f64 {
    (unlearned.0 - retained.0).abs() + (unlearned.1 - retained.1).abs()
}
