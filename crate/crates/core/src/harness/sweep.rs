use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::lm::{Checkpoint, LanguageModel};
use crate::metrics::MetricReport;
use crate::normal::bounded_map;
use crate::objectives::{Method, WhpModel};
use crate::smoothing::{
    instance_bundles, optimal_smoothing_rate, sign_profile, Sign, SignProfile, SmoothingError,
};

use super::config::{ExperimentConfig, Stage};
use super::eval::{evaluate, RetainedReference};
use super::pipeline::{
    evaluate_unlearned, method_label, run_pipeline, run_unlearn, stage_key, RunManifest,
    StageRecord, UnlearnedModel, Workspace,
};
use super::tables::write_report_csv;
use super::train::{EpochLog, UnlearnData};
use super::HarnessError;

/// One unlearning run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub r: f64,
    pub report: MetricReport,
    pub steps: usize,
    pub diverged_at: Option<usize>,
    pub history: Vec<EpochLog>,
    /// Set when the run failed for a reason other than divergence.
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Finetuned and retained reports when `baselines` is on.
    pub baselines: BTreeMap<String, MetricReport>,
    pub probe: ProbeReport,
}

/// Per-instance sign of `<g_f, u>` and the norm-minimizing rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub instance_id: usize,
    pub forget_id: String,
    pub inner_product: f64,
    pub sign: Sign,
    /// `None` when the deflection vanishes.
    pub r_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub profile: SignProfile,
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    /// Writes the sign profile and the per-instance rates as JSON Lines.
    pub fn save(&self, sign_path: &Path, rate_path: &Path) -> Result<(), HarnessError> {
        for p in [sign_path, rate_path] {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut buf = Vec::new();
        self.profile.write_jsonl(&mut buf)?;
        std::fs::write(sign_path, buf)?;
        let mut out = String::new();
        for r in &self.rows {
            out += &serde_json::to_string(r).map_err(|e| HarnessError::Format(e.to_string()))?;
            out.push('\n');
        }
        std::fs::write(rate_path, out)?;
        Ok(())
    }
}

/// Sign profile and `r*` of every forget instance under `ckpt`, using the
/// first `K − 1` companions of each record.
pub fn probe_r(
    ckpt: &Checkpoint,
    forget_ids: &[String],
    data: &UnlearnData,
    k: usize,
) -> Result<ProbeReport, HarnessError> {
    if k < 2 {
        return Err(HarnessError::InvalidConfig(format!(
            "probe-r needs K ≥ 2, got {k}"
        )));
    }
    if data.normals.len() != data.forget.len() || forget_ids.len() != data.forget.len() {
        return Err(HarnessError::MissingData(
            "normal companions for every forget record",
        ));
    }
    let normals: Vec<_> = data
        .normals
        .iter()
        .map(|ns| ns.iter().take(k - 1).cloned().collect::<Vec<_>>())
        .collect();
    let bundles = instance_bundles(ckpt, &data.forget, &normals, k)?;
    let profile = sign_profile(&bundles)?;
    let rows = bundles
        .iter()
        .zip(&profile.rows)
        .zip(forget_ids)
        .map(|((b, s), id)| {
            let r_star = match optimal_smoothing_rate(b) {
                Ok(d) => Some(d.r_star),
                Err(SmoothingError::DegenerateDeflection) => None,
                Err(e) => return Err(HarnessError::from(e)),
            };
            Ok(ProbeRow {
                instance_id: s.instance_id,
                forget_id: id.clone(),
                inner_product: s.inner_product,
                sign: s.sign,
                r_star,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(ProbeReport { profile, rows })
}

fn rate_tag(r: f64) -> String {
    format!("r_{r}")
}

/// Runs the upstream stages, then one SGA run per distinct rate from the
/// same finetuned checkpoint with identical seeds. Duplicate rates yield
/// identical rows. Writes `reports/sweep.csv`, the sign profile, and one
/// manifest per rate under `sweep/`.
pub fn sweep_r(cfg: &ExperimentConfig) -> Result<SweepTable, HarnessError> {
    if cfg.unlearn.method != Method::Sga {
        return Err(HarnessError::InvalidConfig(format!(
            "sweep requires method SGA, got {}",
            cfg.unlearn.method
        )));
    }
    if cfg.sweep.is_empty() {
        return Err(HarnessError::InvalidConfig("empty r list".into()));
    }
    let mut base = cfg.clone();
    base.stages = vec![Stage::Synth, Stage::Finetune, Stage::Normal];
    let upstream = run_pipeline(&base)?.manifest;
    let root = cfg
        .out_dir
        .clone()
        .ok_or_else(|| HarnessError::InvalidConfig("out_dir is not set".into()))?;
    let mut ws = Workspace::new(&root);
    let data = ws.unlearn_data(true)?;
    let vocab = ws.vocab()?.clone();
    let corpus = ws.corpus()?.clone();
    let finetuned = ws.checkpoint("finetuned")?.clone();
    let retained = ws.checkpoint("retained")?.clone();
    let reference = RetainedReference::compute(&retained, &vocab, &corpus)?;

    let mut baselines = BTreeMap::new();
    if cfg.baselines {
        baselines.insert(
            "finetuned".to_string(),
            evaluate(&finetuned, &vocab, &corpus, &reference, &cfg.eval)?,
        );
        baselines.insert(
            "retained".to_string(),
            evaluate(&retained, &vocab, &corpus, &reference, &cfg.eval)?,
        );
    }

    let mut distinct: Vec<f64> = Vec::new();
    for &r in &cfg.sweep {
        if !distinct.iter().any(|d| d.to_bits() == r.to_bits()) {
            distinct.push(r);
        }
    }
    let runs = bounded_map(&distinct, cfg.jobs, |&r| {
        let mut c = cfg.clone();
        c.unlearn.r = r;
        let row = (|| {
            let run = run_unlearn(&c, &finetuned, &data)?;
            let diverged = run.diverged_at.is_some();
            let report = match &run.model {
                UnlearnedModel::Checkpoint(ck) => {
                    evaluate_unlearned(ck, &vocab, &corpus, &reference, &c, diverged)?
                }
                UnlearnedModel::Whp { reinforced, alpha } => {
                    let m = WhpModel {
                        original: &finetuned,
                        reinforced,
                        alpha: *alpha,
                    };
                    evaluate_unlearned(
                        &m as &dyn LanguageModel,
                        &vocab,
                        &corpus,
                        &reference,
                        &c,
                        diverged,
                    )?
                }
            };
            Ok::<_, HarnessError>(SweepRow {
                r,
                report,
                steps: run.steps,
                diverged_at: run.diverged_at,
                history: run.history,
                error: None,
            })
        })();
        row.unwrap_or_else(|e| {
            log::warn!("sweep run r = {r} failed: {e}");
            SweepRow {
                r,
                report: MetricReport::default(),
                steps: 0,
                diverged_at: None,
                history: Vec::new(),
                error: Some(e.to_string()),
            }
        })
    });
    let rows: Vec<SweepRow> = cfg
        .sweep
        .iter()
        .map(|r| {
            let i = distinct
                .iter()
                .position(|d| d.to_bits() == r.to_bits())
                .expect("every rate has a run");
            runs[i].clone()
        })
        .collect();

    for row in distinct.iter().map(|r| {
        &runs[distinct
            .iter()
            .position(|d| d.to_bits() == r.to_bits())
            .expect("present")]
    }) {
        let mut c = cfg.clone();
        c.unlearn.r = row.r;
        c.stages = Stage::ALL.to_vec();
        c.sweep = Vec::new();
        let mut m = RunManifest::new(&c);
        for rec in &upstream.stages {
            m.stages.push(rec.clone());
        }
        m.stages.push(StageRecord {
            stage: Stage::Unlearn,
            key: stage_key(&c, Stage::Unlearn),
            outputs: BTreeMap::new(),
            steps: row.steps,
            diverged_at: row.diverged_at,
            history: row.history.clone(),
            substitutions: Vec::new(),
        });
        if let Some(e) = &row.error {
            m.failure = Some(super::pipeline::StageFailure {
                stage: Stage::Unlearn,
                error: e.clone(),
            });
        } else {
            m.reports.insert("unlearned".into(), row.report.clone());
        }
        m.save(
            &root
                .join("sweep")
                .join(rate_tag(row.r))
                .join("manifest.json"),
        )?;
    }

    let probe = probe_r(
        &finetuned,
        &corpus
            .forget
            .iter()
            .map(|f| f.id.clone())
            .collect::<Vec<_>>(),
        &data,
        cfg.unlearn.k,
    )?;
    let reports_dir = ws.layout.reports_dir();
    probe.save(
        &reports_dir.join("sign_profile.jsonl"),
        &reports_dir.join("r_star.jsonl"),
    )?;

    let mut table: Vec<(String, MetricReport)> = baselines
        .iter()
        .map(|(k, v)| (super::tables::baseline_label(k).to_string(), v.clone()))
        .collect();
    for row in &rows {
        let mut c = cfg.unlearn.clone();
        c.r = row.r;
        table.push((method_label(&c), row.report.clone()));
    }
    write_report_csv(&reports_dir.join("sweep.csv"), &table)?;
    Ok(SweepTable {
        rows,
        baselines,
        probe,
    })
}
