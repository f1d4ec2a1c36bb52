use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ulab_core::harness::{
    export_tables, probe_r, run_pipeline, sweep_r, ExperimentConfig, PipelineRun, Stage, Workspace,
};
use ulab_core::lm::Checkpoint;
use ulab_core::normal::NormalMode;
use ulab_core::objectives::Method;

#[derive(Parser)]
#[command(name = "ulab", version, about = "Desk-scale LLM unlearning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and vocabulary.
    Synth(Opts),
    /// Finetune the original and retained models.
    Finetune(Opts),
    /// Build the normal set (SGA only) and run the configured unlearning method.
    Unlearn(Opts),
    /// Evaluate the unlearned model.
    Eval(Opts),
    /// Run every stage in order.
    Run(Opts),
    /// Run one SGA unlearning per smoothing rate in the sweep list.
    Sweep(Opts),
    /// Export CSV tables, JSON Lines reports and a summary from run manifests.
    Report(ReportOpts),
    /// Per-instance sign of <g_f, u> and optimal smoothing rate on the forget set.
    ProbeR(ProbeOpts),
    /// Print the effective configuration as TOML.
    Config(Opts),
}

/// Config file plus overrides of its most common fields.
#[derive(Args, Clone, Default)]
struct Opts {
    /// TOML experiment config; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root holding corpus/, ckpt/, normal/ and reports/.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Unlearning method, e.g. sga, ga, gd, kl, npo, dpo, flat, task-vector, whp.
    #[arg(long)]
    method: Option<Method>,
    /// Smoothing rate.
    #[arg(long, allow_hyphen_values = true)]
    r: Option<f64>,
    /// Slot count: one forget slot plus K − 1 normal slots.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// similarity, endpoint or fallback-only.
    #[arg(long)]
    normal_mode: Option<NormalMode>,
    /// Companions per forget record.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f64>,
    /// Unlearning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Unlearning learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    ft_epochs: Option<usize>,
    #[arg(long)]
    ft_lr: Option<f64>,
    #[arg(long)]
    authors: Option<usize>,
    /// Comma-separated smoothing rates for `sweep`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    sweep: Option<Vec<f64>>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Also evaluate the finetuned and retained models.
    #[arg(long)]
    baselines: bool,
    #[arg(long)]
    divergence_ppl: Option<f64>,
    #[arg(long)]
    verbmem_prefix: Option<usize>,
}

#[derive(Args)]
struct ReportOpts {
    /// Run roots or manifest files; a root contributes its manifest and every sweep manifest.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Directory for the exported files.
    #[arg(long)]
    dest: PathBuf,
}

#[derive(Args)]
struct ProbeOpts {
    #[command(flatten)]
    opts: Opts,
    /// Checkpoint to probe instead of the finetuned model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Opts {
    fn load(&self, stages: &[Stage]) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)
                .with_context(|| format!("reading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.out {
            cfg.out_dir = Some(v.clone());
        }
        if cfg.out_dir.is_none() {
            cfg.out_dir = Some(PathBuf::from("ulab-out"));
        }
        macro_rules! set {
            ($($field:ident => $($path:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { cfg.$($path).+ = v; })*
            };
        }
        set!(
            seed => seed,
            method => unlearn.method,
            r => unlearn.r,
            k => unlearn.k,
            lambda => unlearn.lambda,
            beta => unlearn.beta,
            alpha => unlearn.alpha,
            normal_mode => normal.mode,
            m => normal.m,
            threshold => normal.threshold,
            epochs => unlearn_schedule.epochs,
            lr => unlearn_schedule.lr,
            batch_size => unlearn_schedule.batch_size,
            ft_epochs => finetune.epochs,
            ft_lr => finetune.lr,
            authors => corpus.authors,
            sweep => sweep,
            jobs => jobs,
            divergence_ppl => divergence_ppl,
            verbmem_prefix => eval.verbmem_prefix,
        );
        if self.baselines {
            cfg.baselines = true;
        }
        if !stages.is_empty() {
            cfg.stages = stages.to_vec();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> &Path {
    cfg.out_dir
        .as_deref()
        .expect("out_dir is set by Opts::load")
}

fn summarize(run: &PipelineRun) {
    for a in &run.activity {
        let state = if a.skipped { "up to date" } else { "done" };
        println!(
            "{:<9} {state:<10} steps={:<6} {:.1}s",
            a.stage.name(),
            a.steps,
            a.seconds
        );
    }
    for (name, report) in &run.manifest.reports {
        let cells = report.csv_row();
        println!(
            "{name}: {}",
            ulab_core::metrics::CSV_HEADER
                .iter()
                .zip(&cells)
                .map(|(h, c)| format!("{h}={c}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
}

fn pipeline(opts: &Opts, stages: &[Stage]) -> Result<()> {
    let cfg = opts.load(stages)?;
    let run = run_pipeline(&cfg)?;
    summarize(&run);
    println!(
        "manifest: {}",
        out_dir(&cfg).join("manifest.json").display()
    );
    Ok(())
}

fn manifests_under(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut found = Vec::new();
    let main = input.join("manifest.json");
    if main.exists() {
        found.push(main);
    }
    let sweep = input.join("sweep");
    if sweep.is_dir() {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&sweep)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").exists())
            .collect();
        dirs.sort();
        found.extend(dirs.into_iter().map(|d| d.join("manifest.json")));
    }
    if found.is_empty() {
        bail!("no manifest found under {}", input.display());
    }
    Ok(found)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(o) => pipeline(&o, &[Stage::Synth]),
        Command::Finetune(o) => pipeline(&o, &[Stage::Finetune]),
        Command::Unlearn(o) => {
            let method = o.load(&[])?.unlearn.method;
            if method == Method::Sga {
                pipeline(&o, &[Stage::Normal, Stage::Unlearn])
            } else {
                pipeline(&o, &[Stage::Unlearn])
            }
        }
        Command::Eval(o) => pipeline(&o, &[Stage::Eval]),
        Command::Run(o) => pipeline(&o, &Stage::ALL),
        Command::Sweep(o) => {
            let cfg = o.load(&[])?;
            let table = sweep_r(&cfg)?;
            for row in &table.rows {
                let flag = match (&row.error, row.diverged_at) {
                    (Some(e), _) => format!(" error: {e}"),
                    (None, Some(s)) => format!(" diverged at step {s}"),
                    _ => String::new(),
                };
                println!("r={:<6} {}{flag}", row.r, row.report.csv_row().join(","));
            }
            let s = table.probe.profile.summary;
            println!(
                "sign profile: {} positive, {} negative, {} zero",
                s.positive, s.negative, s.zero
            );
            println!(
                "table: {}",
                out_dir(&cfg).join("reports/sweep.csv").display()
            );
            Ok(())
        }
        Command::Report(o) => {
            let mut paths = Vec::new();
            for input in &o.inputs {
                paths.extend(manifests_under(input)?);
            }
            for f in export_tables(&paths, &o.dest)? {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::ProbeR(p) => {
            let mut cfg = p
                .opts
                .load(&[Stage::Synth, Stage::Finetune, Stage::Normal])?;
            if p.checkpoint.is_some() {
                cfg.stages = vec![Stage::Synth, Stage::Normal];
            }
            run_pipeline(&cfg)?;
            let mut ws = Workspace::new(out_dir(&cfg));
            let data = ws.unlearn_data(true)?;
            let ids: Vec<String> = ws.corpus()?.forget.iter().map(|f| f.id.clone()).collect();
            let ckpt = match &p.checkpoint {
                Some(path) => {
                    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?
                }
                None => ws.checkpoint("finetuned")?.clone(),
            };
            let report = probe_r(&ckpt, &ids, &data, cfg.unlearn.k)?;
            let dir = ws.layout.reports_dir();
            report.save(&dir.join("sign_profile.jsonl"), &dir.join("r_star.jsonl"))?;
            for row in &report.rows {
                let r = row.r_star.map_or("n/a".to_string(), |r| format!("{r:.4}"));
                println!("{:<10} {:?} r*={r}", row.forget_id, row.sign);
            }
            let s = report.profile.summary;
            println!(
                "{} instances: {} positive, {} negative, {} zero",
                s.instances, s.positive, s.negative, s.zero
            );
            Ok(())
        }
        Command::Config(o) => {
            print!("{}", o.load(&[])?.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
