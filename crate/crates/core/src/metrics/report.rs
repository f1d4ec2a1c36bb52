use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::MetricError;

/// Finite values as JSON numbers, non-finite ones as `"inf"`, `"-inf"` or `"nan"`.
mod lenient {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_finite() => s.serialize_f64(*x),
            Some(x) => s.serialize_str(&super::format_value(*x)),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(match Option::<Raw>::deserialize(d)? {
            None => None,
            Some(Raw::Num(x)) => Some(x),
            Some(Raw::Text(t)) => Some(match t.as_str() {
                "inf" => f64::INFINITY,
                "-inf" => f64::NEG_INFINITY,
                "nan" => f64::NAN,
                other => return Err(serde::de::Error::custom(format!("not a number: {other}"))),
            }),
        })
    }
}

fn format_value(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x}")
    }
}

/// Every evaluation score of one model; absent metrics are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    #[serde(with = "lenient", default)]
    pub forget_quality: Option<f64>,
    #[serde(with = "lenient", default)]
    pub model_utility: Option<f64>,
    #[serde(with = "lenient", default)]
    pub forget_rouge: Option<f64>,
    #[serde(with = "lenient", default)]
    pub retain_rouge: Option<f64>,
    #[serde(with = "lenient", default)]
    pub fq_gap: Option<f64>,
    #[serde(with = "lenient", default)]
    pub perplexity: Option<f64>,
    #[serde(with = "lenient", default)]
    pub bleu: Option<f64>,
    #[serde(with = "lenient", default)]
    pub verbmem: Option<f64>,
    #[serde(with = "lenient", default)]
    pub knowmem_forget: Option<f64>,
    #[serde(with = "lenient", default)]
    pub knowmem_retain: Option<f64>,
    #[serde(with = "lenient", default)]
    pub privleak: Option<f64>,
    /// Hex SHA-256 of the inputs behind each metric.
    #[serde(default)]
    pub inputs_digest: BTreeMap<String, String>,
}

pub const CSV_HEADER: [&str; 11] = [
    "FQ",
    "MU",
    "F-RL",
    "R-RL",
    "FQ-Gap",
    "PPL",
    "BLEU",
    "VerbMem",
    "KnowMem_f",
    "KnowMem_r",
    "PrivLeak",
];

impl MetricReport {
    /// Values in [`CSV_HEADER`] order.
    pub fn values(&self) -> [Option<f64>; 11] {
        [
            self.forget_quality,
            self.model_utility,
            self.forget_rouge,
            self.retain_rouge,
            self.fq_gap,
            self.perplexity,
            self.bleu,
            self.verbmem,
            self.knowmem_forget,
            self.knowmem_retain,
            self.privleak,
        ]
    }

    /// Report from values in [`CSV_HEADER`] order, with no input digests.
    pub fn from_values(v: [Option<f64>; 11]) -> Self {
        Self {
            forget_quality: v[0],
            model_utility: v[1],
            forget_rouge: v[2],
            retain_rouge: v[3],
            fq_gap: v[4],
            perplexity: v[5],
            bleu: v[6],
            verbmem: v[7],
            knowmem_forget: v[8],
            knowmem_retain: v[9],
            privleak: v[10],
            inputs_digest: BTreeMap::new(),
        }
    }

    /// Cells in [`CSV_HEADER`] order; missing values print as `n/a`.
    pub fn csv_row(&self) -> Vec<String> {
        self.values()
            .iter()
            .map(|v| v.map_or_else(|| "n/a".to_string(), format_value))
            .collect()
    }

    /// Checks each present score against its range. A non-finite perplexity
    /// is allowed: it marks a diverged run.
    pub fn validate(&self) -> Result<(), MetricError> {
        let unit = [
            ("FQ", self.forget_quality),
            ("MU", self.model_utility),
            ("F-RL", self.forget_rouge),
            ("R-RL", self.retain_rouge),
            ("BLEU", self.bleu),
        ];
        let pct = [
            ("VerbMem", self.verbmem),
            ("KnowMem_f", self.knowmem_forget),
            ("KnowMem_r", self.knowmem_retain),
        ];
        let check = |name: &str, v: Option<f64>, lo: f64, hi: f64| match v {
            Some(x) if !(lo..=hi).contains(&x) => Err(MetricError::InvalidInput(format!(
                "{name} = {x} outside [{lo}, {hi}]"
            ))),
            _ => Ok(()),
        };
        for (n, v) in unit {
            check(n, v, 0.0, 1.0)?;
        }
        for (n, v) in pct {
            check(n, v, 0.0, 100.0)?;
        }
        check("FQ-Gap", self.fq_gap, 0.0, 2.0)?;
        if let Some(p) = self.perplexity {
            if p.is_finite() && p < 1.0 - 1e-9 {
                return Err(MetricError::InvalidInput(format!("PPL = {p} below 1")));
            }
        }
        Ok(())
    }
}
