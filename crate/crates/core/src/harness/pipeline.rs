use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::lm::{
    token_probability_report, AdamW, Checkpoint, LanguageModel, Provenance, TokenProbRow,
    Vocabulary, BOS,
};
use crate::metrics::MetricReport;
use crate::normal::{
    build_normal_set, HashedNgram, HttpTransport, NormalMode, NormalSet, NormalSource, QARecord,
    Substitution, REFUSALS,
};
use crate::objectives::{Method, UnlearnMethodConfig, WhpModel};

use super::config::{ExperimentConfig, Stage};
use super::corpus::{synth_corpus, Corpus};
use super::eval::{digest_json, evaluate, RetainedReference};
use super::train::{
    batches, encode_pair, encode_record, finetune, reinforce, task_vector, training_examples,
    unlearn, DivergenceGuard, EpochLog, UnlearnData,
};
use super::HarnessError;

/// File locations under one output root.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn vocab(&self) -> PathBuf {
        self.corpus_dir().join("vocab.json")
    }

    pub fn ckpt(&self, name: &str) -> PathBuf {
        self.root.join("ckpt").join(format!("{name}.ckpt"))
    }

    pub fn normal_set(&self) -> PathBuf {
        self.root.join("normal").join("normal_set.jsonl")
    }

    pub fn substitutions(&self) -> PathBuf {
        self.root.join("normal").join("substitutions.jsonl")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.reports_dir().join(format!("{name}.json"))
    }

    pub fn token_probs(&self) -> PathBuf {
        self.reports_dir().join("token_probs.jsonl")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }
}

pub fn sha256_file(path: &Path) -> Result<String, HarnessError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// What one stage produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Digest of the config sections (and upstream keys) the stage reads.
    pub key: String,
    /// Output paths relative to the run root, with their SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Optimizer steps taken to produce the outputs.
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub substitutions: Vec<Substitution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: String,
}

/// Self-describing record of a run: the full config, stage outputs and
/// metric reports. Contains no absolute paths or timings so that identical
/// runs produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
    pub reports: BTreeMap<String, MetricReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            config_digest: cfg.digest(),
            config: cfg.recorded(),
            stages: Vec::new(),
            reports: BTreeMap::new(),
            failure: None,
        }
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    fn upsert(&mut self, rec: StageRecord) {
        self.stages.retain(|s| s.stage != rec.stage);
        self.stages.push(rec);
        self.stages.sort_by_key(|s| s.stage);
    }

    pub fn to_json(&self) -> Result<String, HarnessError> {
        serde_json::to_string_pretty(self).map_err(|e| HarnessError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
    }
}

/// Whether a stage ran or was reused, and how many optimizer steps it took.
#[derive(Debug, Clone, PartialEq)]
pub struct StageActivity {
    pub stage: Stage,
    pub skipped: bool,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub manifest: RunManifest,
    pub activity: Vec<StageActivity>,
}

impl PipelineRun {
    /// Optimizer steps executed in this invocation (zero when every stage was reused).
    pub fn executed_steps(&self) -> usize {
        self.activity
            .iter()
            .filter(|a| !a.skipped)
            .map(|a| a.steps)
            .sum()
    }
}

/// Idempotence keys: each stage digests what it reads plus its upstream keys.
pub(crate) fn stage_key(cfg: &ExperimentConfig, stage: Stage) -> String {
    let synth = digest_json(&("synth", cfg.seed, &cfg.corpus, cfg.model.vocab_size));
    let finetune = digest_json(&("finetune", &synth, cfg.seed, &cfg.model, &cfg.finetune));
    let normal = digest_json(&("normal", &synth, &cfg.normal));
    match stage {
        Stage::Synth => synth,
        Stage::Finetune => finetune,
        Stage::Normal => normal,
        Stage::Unlearn => unlearn_key(cfg, &finetune, &normal),
        Stage::Eval => digest_json(&(
            "eval",
            unlearn_key(cfg, &finetune, &normal),
            &cfg.eval,
            cfg.baselines,
        )),
    }
}

fn unlearn_key(cfg: &ExperimentConfig, finetune: &str, normal: &str) -> String {
    let method = cfg.unlearn.method;
    let normal = (method == Method::Sga).then_some(normal);
    let reinforce = matches!(method, Method::TaskVector | Method::Whp).then_some(&cfg.reinforce);
    digest_json(&(
        "unlearn",
        finetune,
        normal,
        cfg.seed,
        &cfg.unlearn,
        &cfg.unlearn_schedule,
        reinforce,
        cfg.divergence_ppl,
    ))
}

/// Loaded artifacts of one run root.
pub struct Workspace {
    pub layout: Layout,
    corpus: Option<Corpus>,
    vocab: Option<Vocabulary>,
    ckpts: BTreeMap<String, Checkpoint>,
    normals: Option<NormalSet>,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            layout: Layout::new(root),
            corpus: None,
            vocab: None,
            ckpts: BTreeMap::new(),
            normals: None,
        }
    }

    pub fn corpus(&mut self) -> Result<&Corpus, HarnessError> {
        if self.corpus.is_none() {
            let dir = self.layout.corpus_dir();
            if !dir.join("forget.jsonl").exists() {
                return Err(HarnessError::MissingData("corpus (run the synth stage)"));
            }
            self.corpus = Some(Corpus::load(&dir)?);
        }
        Ok(self.corpus.as_ref().expect("loaded"))
    }

    pub fn vocab(&mut self) -> Result<&Vocabulary, HarnessError> {
        if self.vocab.is_none() {
            let path = self.layout.vocab();
            if !path.exists() {
                return Err(HarnessError::MissingData(
                    "vocabulary (run the synth stage)",
                ));
            }
            let v = serde_json::from_str(&std::fs::read_to_string(&path)?)
                .map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))?;
            self.vocab = Some(v);
        }
        Ok(self.vocab.as_ref().expect("loaded"))
    }

    pub fn checkpoint(&mut self, name: &str) -> Result<&Checkpoint, HarnessError> {
        if !self.ckpts.contains_key(name) {
            let path = self.layout.ckpt(name);
            if !path.exists() {
                return Err(HarnessError::Format(format!(
                    "missing checkpoint {}",
                    path.display()
                )));
            }
            self.ckpts
                .insert(name.to_string(), Checkpoint::load(&path)?);
        }
        Ok(&self.ckpts[name])
    }

    pub fn normal_set(&mut self) -> Result<&NormalSet, HarnessError> {
        if self.normals.is_none() {
            let path = self.layout.normal_set();
            if !path.exists() {
                return Err(HarnessError::MissingData(
                    "normal set (run the normal stage)",
                ));
            }
            self.normals = Some(NormalSet::load(&path)?);
        }
        Ok(self.normals.as_ref().expect("loaded"))
    }

    fn put_checkpoint(&mut self, name: &str, ck: Checkpoint) -> Result<String, HarnessError> {
        let path = self.layout.ckpt(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        ck.save(&path)?;
        self.ckpts.insert(name.to_string(), ck);
        Ok(self.layout.relative(&path))
    }

    /// Training material for every unlearning method, aligned with the forget split.
    pub fn unlearn_data(&mut self, needs_normals: bool) -> Result<UnlearnData, HarnessError> {
        let normals = if needs_normals {
            Some(self.normal_set()?.clone())
        } else {
            None
        };
        let vocab = self.vocab()?.clone();
        let corpus = self.corpus()?;
        build_unlearn_data(&vocab, corpus, normals.as_ref())
    }
}

pub fn build_unlearn_data(
    vocab: &Vocabulary,
    corpus: &Corpus,
    normals: Option<&NormalSet>,
) -> Result<UnlearnData, HarnessError> {
    let forget = &corpus.forget;
    let normals = match normals {
        Some(set) => forget
            .iter()
            .map(|f| {
                let comps = set.get(&f.id).ok_or(HarnessError::MissingData(
                    "normal-set entry for a forget record",
                ))?;
                Ok(comps
                    .iter()
                    .map(|c| encode_pair(vocab, &c.question, &c.answer))
                    .collect())
            })
            .collect::<Result<Vec<_>, HarnessError>>()?,
        None => Vec::new(),
    };
    let refusal = forget
        .iter()
        .enumerate()
        .map(|(i, f)| encode_pair(vocab, &f.question, REFUSALS[i % REFUSALS.len()]))
        .collect();
    // An unrelated answer: a retain answer chosen by a fixed stride.
    let random = if corpus.retain.is_empty() {
        Vec::new()
    } else {
        let n = corpus.retain.len();
        forget
            .iter()
            .enumerate()
            .map(|(i, f)| encode_pair(vocab, &f.question, &corpus.retain[(i * 7 + 3) % n].answer))
            .collect()
    };
    Ok(UnlearnData {
        forget: forget.iter().map(|r| encode_record(vocab, r)).collect(),
        normals,
        retain: corpus
            .retain
            .iter()
            .map(|r| encode_record(vocab, r))
            .collect(),
        refusal,
        random,
    })
}

/// Checkpoints (or decoding-time combinations) produced by the unlearn stage.
pub enum UnlearnedModel {
    Checkpoint(Checkpoint),
    Whp { reinforced: Checkpoint, alpha: f64 },
}

/// Result of unlearning from a finetuned checkpoint under `cfg`.
pub struct UnlearnRun {
    pub model: UnlearnedModel,
    pub steps: usize,
    pub diverged_at: Option<usize>,
    pub history: Vec<EpochLog>,
}

/// Runs the configured unlearning method from `finetuned`.
pub fn run_unlearn(
    cfg: &ExperimentConfig,
    finetuned: &Checkpoint,
    data: &UnlearnData,
) -> Result<UnlearnRun, HarnessError> {
    let method = cfg.unlearn.method;
    match method {
        Method::TaskVector | Method::Whp => {
            let (reinforced, stats) = reinforce(finetuned, &data.forget, &cfg.reinforce, cfg.seed)?;
            let model = if method == Method::Whp {
                UnlearnedModel::Whp {
                    reinforced,
                    alpha: cfg.unlearn.alpha,
                }
            } else {
                UnlearnedModel::Checkpoint(task_vector(finetuned, &reinforced)?)
            };
            Ok(UnlearnRun {
                model,
                steps: stats.steps,
                diverged_at: None,
                history: Vec::new(),
            })
        }
        _ => {
            let guard = DivergenceGuard {
                retain: batches(&data.retain, cfg.unlearn_schedule.batch_size)?,
                max_ppl: cfg.divergence_ppl,
            };
            let o = unlearn(
                finetuned,
                &cfg.unlearn,
                data,
                &cfg.unlearn_schedule,
                cfg.seed,
                Some(&guard),
            )?;
            Ok(UnlearnRun {
                model: UnlearnedModel::Checkpoint(o.checkpoint),
                steps: o.steps,
                diverged_at: o.diverged_at,
                history: o.history,
            })
        }
    }
}

/// Evaluates an unlearned model. A diverged run whose metrics cannot be
/// computed reports an infinite perplexity and nothing else.
pub fn evaluate_unlearned(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    corpus: &Corpus,
    reference: &RetainedReference,
    cfg: &ExperimentConfig,
    diverged: bool,
) -> Result<MetricReport, HarnessError> {
    match evaluate(model, vocab, corpus, reference, &cfg.eval) {
        Ok(r) => Ok(r),
        Err(e) if diverged => {
            log::warn!("diverged run could not be evaluated: {e}");
            Ok(MetricReport {
                perplexity: Some(f64::INFINITY),
                ..MetricReport::default()
            })
        }
        Err(e) => Err(e),
    }
}

/// Label of the report row for an unlearning method.
pub fn method_label(cfg: &UnlearnMethodConfig) -> String {
    match cfg.method {
        Method::Sga => format!("SGA (r={})", cfg.r),
        m => m.name().to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text =
        serde_json::to_string_pretty(value).map_err(|e| HarnessError::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for r in rows {
        out += &serde_json::to_string(r).map_err(|e| HarnessError::Format(e.to_string()))?;
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Whether `rec` can be reused: same key and every output unchanged on disk.
fn reusable(layout: &Layout, rec: &StageRecord, key: &str) -> bool {
    rec.key == key
        && rec
            .outputs
            .iter()
            .all(|(rel, hash)| sha256_file(&layout.root.join(rel)).is_ok_and(|h| &h == hash))
}

struct StageOutput {
    files: Vec<PathBuf>,
    steps: usize,
    diverged_at: Option<usize>,
    history: Vec<EpochLog>,
    substitutions: Vec<Substitution>,
    reports: BTreeMap<String, MetricReport>,
}

impl StageOutput {
    fn files(files: Vec<PathBuf>) -> Self {
        Self {
            files,
            steps: 0,
            diverged_at: None,
            history: Vec::new(),
            substitutions: Vec::new(),
            reports: BTreeMap::new(),
        }
    }
}

fn run_synth(ws: &mut Workspace, cfg: &ExperimentConfig) -> Result<StageOutput, HarnessError> {
    let corpus = synth_corpus(&cfg.corpus, cfg.seed)?;
    let dir = ws.layout.corpus_dir();
    corpus.save(&dir)?;
    let vocab = Vocabulary::train(&corpus.all_texts(), cfg.model.vocab_size);
    write_json(&ws.layout.vocab(), &vocab)?;
    let mut files: Vec<PathBuf> = super::corpus::SPLITS
        .iter()
        .map(|s| dir.join(format!("{s}.jsonl")))
        .collect();
    files.push(ws.layout.vocab());
    ws.corpus = Some(corpus);
    ws.vocab = Some(vocab);
    Ok(StageOutput::files(files))
}

fn run_finetune(ws: &mut Workspace, cfg: &ExperimentConfig) -> Result<StageOutput, HarnessError> {
    let vocab = ws.vocab()?.clone();
    let corpus = ws.corpus()?.clone();
    let model_cfg = cfg.model.model_config(vocab.size(), cfg.seed);
    let mut steps = 0;
    let mut files = Vec::new();
    for (name, records, provenance) in [
        ("finetuned", corpus.full_training(), Provenance::Finetuned),
        ("retained", corpus.retained_training(), Provenance::Retained),
    ] {
        let mut ck = Checkpoint::init(model_cfg.clone())?.derive(provenance);
        let examples = training_examples(&vocab, &records);
        let stats = finetune(
            &mut ck,
            &examples,
            &cfg.finetune,
            cfg.seed,
            &AdamW::default(),
        )?;
        log::info!(
            "{name}: {} steps, final loss {:.4}",
            stats.steps,
            stats.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
        steps += stats.steps;
        ws.put_checkpoint(name, ck)?;
        files.push(ws.layout.ckpt(name));
    }
    Ok(StageOutput {
        steps,
        ..StageOutput::files(files)
    })
}

fn run_normal(ws: &mut Workspace, cfg: &ExperimentConfig) -> Result<StageOutput, HarnessError> {
    let corpus = ws.corpus()?.clone();
    let n = &cfg.normal;
    let texts: Vec<String> = corpus.retain.iter().map(QARecord::text).collect();
    let provider = HashedNgram::default().fit(&texts);
    let transport = HttpTransport;
    let source = match n.mode {
        NormalMode::Similarity => NormalSource::Similarity {
            retain: &corpus.retain,
            provider: &provider,
            threshold: n.threshold,
        },
        NormalMode::Endpoint => NormalSource::Endpoint {
            config: n
                .endpoint
                .as_ref()
                .ok_or(HarnessError::MissingData("normal.endpoint"))?,
            transport: &transport,
        },
        NormalMode::FallbackOnly => NormalSource::FallbackOnly,
    };
    let built = build_normal_set(&corpus.forget, n.m, &source)?;
    if !n.allow_fallback && !built.substitutions.is_empty() {
        return Err(HarnessError::InvalidConfig(format!(
            "{} companions fell back to safe responses and allow_fallback is off",
            built.substitutions.len()
        )));
    }
    let path = ws.layout.normal_set();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    built.set.save(&path)?;
    let mut files = vec![path];
    if !built.substitutions.is_empty() {
        write_jsonl(&ws.layout.substitutions(), &built.substitutions)?;
        files.push(ws.layout.substitutions());
    }
    ws.normals = Some(built.set);
    Ok(StageOutput {
        substitutions: built.substitutions,
        ..StageOutput::files(files)
    })
}

fn run_unlearn_stage(
    ws: &mut Workspace,
    cfg: &ExperimentConfig,
) -> Result<StageOutput, HarnessError> {
    let data = ws.unlearn_data(cfg.unlearn.method == Method::Sga)?;
    let finetuned = ws.checkpoint("finetuned")?.clone();
    let run = run_unlearn(cfg, &finetuned, &data)?;
    let mut files = Vec::new();
    match run.model {
        UnlearnedModel::Checkpoint(ck) => {
            ws.put_checkpoint("unlearned", ck)?;
            files.push(ws.layout.ckpt("unlearned"));
        }
        UnlearnedModel::Whp { reinforced, .. } => {
            ws.put_checkpoint("reinforced", reinforced)?;
            files.push(ws.layout.ckpt("reinforced"));
        }
    }
    Ok(StageOutput {
        steps: run.steps,
        diverged_at: run.diverged_at,
        history: run.history,
        ..StageOutput::files(files)
    })
}

fn run_eval(
    ws: &mut Workspace,
    cfg: &ExperimentConfig,
    diverged: bool,
) -> Result<StageOutput, HarnessError> {
    let vocab = ws.vocab()?.clone();
    let corpus = ws.corpus()?.clone();
    let finetuned = ws.checkpoint("finetuned")?.clone();
    let retained = ws.checkpoint("retained")?.clone();
    let reference = RetainedReference::compute(&retained, &vocab, &corpus)?;
    let mut reports = BTreeMap::new();
    let mut named: Vec<(String, Checkpoint)> = Vec::new();
    if cfg.baselines {
        reports.insert(
            "finetuned".to_string(),
            evaluate(&finetuned, &vocab, &corpus, &reference, &cfg.eval)?,
        );
        reports.insert(
            "retained".to_string(),
            evaluate(&retained, &vocab, &corpus, &reference, &cfg.eval)?,
        );
        named.push(("finetuned".into(), finetuned.clone()));
        named.push(("retained".into(), retained));
    }
    let unlearned = if cfg.unlearn.method == Method::Whp {
        let reinforced = ws.checkpoint("reinforced")?.clone();
        let whp = WhpModel {
            original: &finetuned,
            reinforced: &reinforced,
            alpha: cfg.unlearn.alpha,
        };
        evaluate_unlearned(&whp, &vocab, &corpus, &reference, cfg, diverged)?
    } else {
        let ck = ws.checkpoint("unlearned")?.clone();
        let report = evaluate_unlearned(&ck, &vocab, &corpus, &reference, cfg, diverged)?;
        named.push(("unlearned".into(), ck));
        report
    };
    reports.insert("unlearned".to_string(), unlearned);

    let mut files = Vec::new();
    for (name, report) in &reports {
        let path = ws.layout.report(name);
        write_json(&path, report)?;
        files.push(path);
    }
    if let Some(first) = corpus.forget.first() {
        let refs: Vec<(String, &Checkpoint)> = named.iter().map(|(n, c)| (n.clone(), c)).collect();
        let mut prompt = vec![BOS];
        prompt.extend(vocab.encode(&first.question));
        let targets = vocab.encode(&format!(" {}", first.answer));
        let rows: Vec<TokenProbRow> = if diverged {
            Vec::new()
        } else {
            token_probability_report(&refs, &prompt, &targets)?
        };
        write_jsonl(&ws.layout.token_probs(), &rows)?;
        files.push(ws.layout.token_probs());
    }
    Ok(StageOutput {
        reports,
        ..StageOutput::files(files)
    })
}

/// Upstream stages whose current outputs `stage` reads.
fn dependencies(cfg: &ExperimentConfig, stage: Stage) -> Vec<Stage> {
    match stage {
        Stage::Synth => vec![],
        Stage::Finetune | Stage::Normal => vec![Stage::Synth],
        Stage::Unlearn if cfg.unlearn.method == Method::Sga => {
            vec![Stage::Finetune, Stage::Normal]
        }
        Stage::Unlearn => vec![Stage::Finetune],
        Stage::Eval => vec![Stage::Finetune, Stage::Unlearn],
    }
}

fn prior_manifest(layout: &Layout) -> Option<RunManifest> {
    RunManifest::load(&layout.manifest()).ok()
}

fn write_timings(layout: &Layout, activity: &[StageActivity]) -> Result<(), HarnessError> {
    let mut timings: BTreeMap<String, f64> = std::fs::read_to_string(layout.timings())
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    for a in activity.iter().filter(|a| !a.skipped) {
        timings.insert(a.stage.name().to_string(), a.seconds);
    }
    write_json(&layout.timings(), &timings)
}

/// Runs the configured stages in order under `cfg.out_dir`. Stages whose
/// key matches the previous manifest and whose outputs are unchanged are
/// reused without retraining. On failure the partial manifest is written
/// and the error names the stage.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineRun, HarnessError> {
    cfg.validate()?;
    let root = cfg
        .out_dir
        .clone()
        .ok_or_else(|| HarnessError::InvalidConfig("out_dir is not set".into()))?;
    std::fs::create_dir_all(&root)?;
    let mut ws = Workspace::new(root);
    let prior = prior_manifest(&ws.layout);
    let mut manifest = RunManifest::new(cfg);
    // Records of stages not selected this time carry over when still valid.
    if let Some(p) = &prior {
        for rec in &p.stages {
            if !cfg.wants(rec.stage) && reusable(&ws.layout, rec, &stage_key(cfg, rec.stage)) {
                manifest.upsert(rec.clone());
                if rec.stage == Stage::Eval {
                    manifest.reports = p.reports.clone();
                }
            }
        }
    }
    let mut activity = Vec::new();
    for stage in Stage::ALL {
        if !cfg.wants(stage) {
            continue;
        }
        let key = stage_key(cfg, stage);
        let t0 = Instant::now();
        if let Some(rec) = prior
            .as_ref()
            .and_then(|p| p.stage(stage))
            .filter(|rec| reusable(&ws.layout, rec, &key))
        {
            log::info!("stage {stage}: up to date");
            if stage == Stage::Eval {
                manifest.reports = prior.as_ref().expect("prior").reports.clone();
            }
            manifest.upsert(rec.clone());
            activity.push(StageActivity {
                stage,
                skipped: true,
                steps: rec.steps,
                seconds: 0.0,
            });
            continue;
        }
        log::info!("stage {stage}: running");
        let missing: Vec<&str> = dependencies(cfg, stage)
            .into_iter()
            .filter(|d| manifest.stage(*d).is_none())
            .map(Stage::name)
            .collect();
        let result = if !missing.is_empty() {
            Err(HarnessError::InvalidConfig(format!(
                "stage {stage} needs up-to-date outputs of: {}",
                missing.join(", ")
            )))
        } else {
            match stage {
                Stage::Synth => run_synth(&mut ws, cfg),
                Stage::Finetune => run_finetune(&mut ws, cfg),
                Stage::Normal => run_normal(&mut ws, cfg),
                Stage::Unlearn => run_unlearn_stage(&mut ws, cfg),
                Stage::Eval => {
                    let diverged = manifest
                        .stage(Stage::Unlearn)
                        .is_some_and(|r| r.diverged_at.is_some());
                    run_eval(&mut ws, cfg, diverged)
                }
            }
        };
        let out = match result.and_then(|out| {
            let mut outputs = BTreeMap::new();
            for f in &out.files {
                outputs.insert(ws.layout.relative(f), sha256_file(f)?);
            }
            Ok((out, outputs))
        }) {
            Ok(v) => v,
            Err(e) => {
                manifest.failure = Some(StageFailure {
                    stage,
                    error: e.to_string(),
                });
                manifest.save(&ws.layout.manifest())?;
                write_timings(&ws.layout, &activity)?;
                return Err(HarnessError::Stage {
                    stage: stage.name().to_string(),
                    source: Box::new(e),
                });
            }
        };
        let (out, outputs) = out;
        if stage == Stage::Eval {
            manifest.reports = out.reports;
        }
        activity.push(StageActivity {
            stage,
            skipped: false,
            steps: out.steps,
            seconds: t0.elapsed().as_secs_f64(),
        });
        manifest.upsert(StageRecord {
            stage,
            key,
            outputs,
            steps: out.steps,
            diverged_at: out.diverged_at,
            history: out.history,
            substitutions: out.substitutions,
        });
    }
    manifest.save(&ws.layout.manifest())?;
    write_timings(&ws.layout, &activity)?;
    Ok(PipelineRun { manifest, activity })
}
