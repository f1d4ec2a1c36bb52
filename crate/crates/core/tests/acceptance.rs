//! End-to-end acceptance suite. Each criterion is its own test and prints
//! one `criterion N: PASS|FAIL ...` line to stdout, bypassing capture.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ulab_core::autodiff::finite_difference_check;
use ulab_core::harness::{
    best_r, export_tables, run_pipeline, sweep_r, CorpusSpec, ExperimentConfig, ModelSection,
    Schedule, SweepTable,
};
use ulab_core::lm::{sft_loss, AdamW, Checkpoint, Example, ModelConfig, Provenance, SequenceBatch};
use ulab_core::metrics::{forget_quality, ks_statistic, mia_auc, privleak, rouge_l, MetricReport};
use ulab_core::normal::{
    generate_via_endpoint, read_corpus, FailingTransport, FixtureTransport,
    GeneratorEndpointConfig, PromptTemplate, Provenance as Origin, QARecord,
};
use ulab_core::objectives::{
    gls_smooth, gradient_ascent_loss, method_loss, sga_loss, Divergence, Method, Objective,
    ObjectiveInputs, UnlearnMethodConfig,
};
use ulab_core::smoothing::{optimal_smoothing_rate, GradientBundle, SignProfile};

fn report(n: u32, started: Instant, outcome: Result<String, String>) {
    let secs = started.elapsed().as_secs_f64();
    let line = match &outcome {
        Ok(detail) => format!("criterion {n}: PASS ({secs:.1}s) {detail}\n"),
        Err(why) => format!("criterion {n}: FAIL ({secs:.1}s) {why}\n"),
    };
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    if let Err(why) = outcome {
        panic!("criterion {n} failed: {why}");
    }
}

fn check(ok: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(why())
    }
}

// ---------------------------------------------------------------- fixtures

fn small_model(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 8,
        seed,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, vocab: usize) -> SequenceBatch {
    let ex: Vec<Example> = (0..rows)
        .map(|_| {
            let p = rng.random_range(1..=3);
            let a = rng.random_range(1..=3);
            let prompt = (0..p).map(|_| rng.random_range(4..vocab)).collect();
            let answer = (0..a).map(|_| rng.random_range(4..vocab)).collect();
            Example::new(prompt, answer)
        })
        .collect();
    SequenceBatch::from_examples(&ex).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

// --------------------------------------------------------------- 1. GLS

#[test]
fn criterion_01_gls_worked_examples() {
    let t = Instant::now();
    let outcome = (|| {
        for (r, want) in [(0.3, [0.8, 0.1, 0.1]), (-0.3, [1.2, -0.1, -0.1])] {
            let got = gls_smooth(&[1.0, 0.0, 0.0], r);
            let err = got
                .iter()
                .zip(want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            check(err <= 1e-12, || format!("r={r}: {got:?} vs {want:?}"))?;
        }
        check(t.elapsed().as_secs_f64() < 1.0, || "slower than 1 s".into())?;
        Ok("both worked examples within 1e-12".to_string())
    })();
    report(1, t, outcome);
}

// ------------------------------------------------------ 2. GA equivalence

#[test]
fn criterion_02_sga_at_zero_matches_gradient_ascent() {
    let t = Instant::now();
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = Checkpoint::init_with_std(small_model(5), 0.3).unwrap();
        let (mut ga, mut sga) = (init.clone(), init);
        let cfg = UnlearnMethodConfig::sga(0.0, 4);
        let opt = AdamW::default();
        let mut worst = 0.0f64;
        for step in 0..20 {
            let forget = random_batch(&mut rng, 3, 16);
            let normals: Vec<SequenceBatch> =
                (0..3).map(|_| random_batch(&mut rng, 3, 16)).collect();
            let a = gradient_ascent_loss(&ga, &forget).unwrap();
            let b = sga_loss(&sga, &forget, &normals, &cfg).unwrap();
            check(a.value() == b.value(), || {
                format!("step {step}: loss {} vs {}", a.value(), b.value())
            })?;
            opt.step(&mut ga, &a.gradient().unwrap(), 1e-2).unwrap();
            opt.step(&mut sga, &b.gradient().unwrap(), 1e-2).unwrap();
            for (x, y) in ga.theta.iter().zip(&sga.theta) {
                worst = worst.max((x - y).abs());
            }
            check(worst <= 1e-12, || {
                format!("step {step}: coordinate gap {worst:e}")
            })?;
        }
        check(t.elapsed().as_secs_f64() < 30.0, || {
            "slower than 30 s".into()
        })?;
        Ok(format!("20 steps, max coordinate gap {worst:e}"))
    })();
    report(2, t, outcome);
}

// ------------------------------------------------ 3. gradient consistency

/// Finite-difference relative error over coordinates whose analytic
/// gradient is at least 1e-6; smaller ones sit at central-difference
/// roundoff and the attention key bias has a zero gradient.
fn fd_error(ck: &Checkpoint, loss: impl Fn(&Checkpoint) -> Objective) -> f64 {
    let g0 = loss(ck).gradient().unwrap();
    let free: Vec<usize> = (0..ck.theta.len())
        .filter(|&i| g0[i].abs() >= 1e-6)
        .collect();
    assert!(free.len() * 10 >= ck.theta.len() * 8);
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
fn criterion_03_sga_gradient_is_weighted_term_sum() {
    let t = Instant::now();
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0f64;
        for case in 0..20 {
            let ck = Checkpoint::init_with_std(small_model(100 + case), 0.4).unwrap();
            let r: f64 = rng.random_range(-3.0..3.0);
            let k: usize = rng.random_range(2..=5);
            let rows = rng.random_range(1..=4);
            let forget = random_batch(&mut rng, rows, 16);
            let normals: Vec<SequenceBatch> = (0..k - 1)
                .map(|_| random_batch(&mut rng, rows, 16))
                .collect();
            let cfg = UnlearnMethodConfig::sga(r, k);
            let g = sga_loss(&ck, &forget, &normals, &cfg)
                .unwrap()
                .gradient()
                .unwrap();
            let kf = k as f64;
            let (w_f, w_p) = (1.0 - r + r / kf, r / kf);
            let mut want: Vec<f64> = sft_loss(&ck, &forget)
                .unwrap()
                .gradient()
                .unwrap()
                .iter()
                .map(|x| -w_f * x)
                .collect();
            for n in &normals {
                let gp = sft_loss(&ck, n).unwrap().gradient().unwrap();
                for (w, x) in want.iter_mut().zip(gp) {
                    *w += w_p * x;
                }
            }
            let e = rel_err(&g, &want);
            worst = worst.max(e);
            check(e <= 1e-10, || {
                format!("case {case} (r={r:.3}, K={k}): {e:e}")
            })?;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let ck = Checkpoint::init_with_std(small_model(11), 0.5).unwrap();
        let other = Checkpoint::init_with_std(small_model(12), 0.5).unwrap();
        let reference =
            Checkpoint::from_theta(ck.config.clone(), other.theta, Provenance::Original).unwrap();
        let forget = random_batch(&mut rng, 2, 16);
        let retain = random_batch(&mut rng, 2, 16);
        let normals: Vec<SequenceBatch> = (0..2).map(|_| random_batch(&mut rng, 2, 16)).collect();
        let refusal = random_batch(&mut rng, 2, 16);
        let random = random_batch(&mut rng, 2, 16);
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
        let mut fd_worst = 0.0f64;
        for c in &cases {
            let err = fd_error(&ck, |m| {
                let inputs = ObjectiveInputs::new(&forget)
                    .retain(&retain)
                    .normals(&normals)
                    .refusal(&refusal)
                    .random(&random)
                    .reference(&reference);
                method_loss(m, c, inputs).unwrap()
            });
            fd_worst = fd_worst.max(err);
            check(err < 1e-4, || {
                format!("{} finite-difference error {err:e}", c.method)
            })?;
        }
        check(t.elapsed().as_secs_f64() < 120.0, || {
            "slower than 2 min".into()
        })?;
        Ok(format!(
            "20 cases, worst {worst:e}; {} objectives, worst FD {fd_worst:e}",
            cases.len()
        ))
    })();
    report(3, t, outcome);
}

// ------------------------------------------------------- 4. r* closed form

#[test]
fn criterion_04_optimal_rate_matches_grid_search() {
    let t = Instant::now();
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst = 0.0f64;
        let (mut done, mut outside) = (0, 0);
        while done < 100 {
            let dim = rng.random_range(2..=12);
            let k: usize = rng.random_range(2..=6);
            let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            let g_f = vec(&mut rng);
            let g_p: Vec<Vec<f64>> = (0..k - 1).map(|_| vec(&mut rng)).collect();
            // Oracle: u and ‖d(r)‖² straight from the definitions.
            let c = 1.0 - 1.0 / k as f64;
            let u: Vec<f64> = (0..dim)
                .map(|i| g_p.iter().map(|g| g[i]).sum::<f64>() / g_p.len() as f64 - c * g_f[i])
                .collect();
            if u.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-6 {
                continue;
            }
            let norm_sq = |r: f64| -> f64 { (0..dim).map(|i| (-g_f[i] + r * u[i]).powi(2)).sum() };
            let (mut best, mut best_v) = (-10.0, f64::INFINITY);
            for s in 0..=200_000 {
                let r = -10.0 + s as f64 * 1e-4;
                let v = norm_sq(r);
                if v < best_v {
                    best_v = v;
                    best = r;
                }
            }
            // A boundary argmin means the minimizer lies outside the grid.
            if best <= -10.0 + 5e-5 || best >= 10.0 - 5e-5 {
                outside += 1;
                continue;
            }
            let bundle = GradientBundle::new(g_f.clone(), g_p, k).unwrap();
            let d = optimal_smoothing_rate(&bundle).map_err(|e| e.to_string())?;
            let gap = (d.r_star - best).abs();
            worst = worst.max(gap);
            check(gap <= 2e-4, || {
                format!("case {done}: r* {} vs grid {best}", d.r_star)
            })?;
            let at_star = norm_sq(d.r_star);
            for _ in 0..10 {
                let r: f64 = rng.random_range(-10.0..10.0);
                check(at_star <= norm_sq(r), || {
                    format!("case {done}: ‖d(r*)‖² {at_star} > ‖d({r})‖²")
                })?;
            }
            let inner: f64 = g_f.iter().zip(&u).map(|(a, b)| a * b).sum();
            check(d.r_star.signum() == inner.signum(), || {
                format!("case {done}: sign(r*) {} vs <g_f,u> {inner}", d.r_star)
            })?;
            done += 1;
        }
        check(t.elapsed().as_secs_f64() < 60.0, || {
            "slower than 1 min".into()
        })?;
        Ok(format!(
            "100 bundles ({outside} redrawn with r* off the grid), worst grid gap {worst:e}"
        ))
    })();
    report(4, t, outcome);
}

// --------------------------------------------------------- 5. metric oracles

/// LCS by enumerating every subsequence of the shorter sequence.
fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let n = mask.count_ones() as usize;
        if n <= best {
            continue;
        }
        let sub: Vec<&String> = (0..short.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| &short[i])
            .collect();
        let mut it = long.iter();
        if sub.iter().all(|s| it.any(|x| x == *s)) {
            best = n;
        }
    }
    best
}

fn pairwise_auc(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut twice = 0u64;
    for m in members {
        for n in nonmembers {
            twice += if m < n {
                2
            } else if m == n {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * members.len() * nonmembers.len()) as f64
}

fn sup_cdf_gap(a: &[f64], b: &[f64]) -> f64 {
    let mut points: Vec<f64> = a.iter().chain(b).copied().collect();
    points.sort_by(f64::total_cmp);
    let cdf = |s: &[f64], x: f64| s.iter().filter(|v| **v <= x).count() as f64 / s.len() as f64;
    points
        .iter()
        .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_05_metrics_match_oracles() {
    let t = Instant::now();
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let words = ["a", "b", "c", "d", "e", "f"];
        for case in 0..1000 {
            let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
                let n = rng.random_range(1..=12);
                (0..n)
                    .map(|_| words[rng.random_range(0..words.len())].to_string())
                    .collect()
            };
            let (c, r) = (sentence(&mut rng), sentence(&mut rng));
            let lcs = brute_lcs(&c, &r);
            let got = rouge_l(&c.join(" "), &r.join(" "));
            let (recall, precision) = (lcs as f64 / r.len() as f64, lcs as f64 / c.len() as f64);
            check(got.recall == recall && got.precision == precision, || {
                format!("case {case}: {got:?} vs lcs {lcs}")
            })?;
        }

        for case in 0..100 {
            let n = rng.random_range(1..=40);
            let m = rng.random_range(1..=40);
            // Coarse values force ties.
            let mut draw = |k| -> Vec<f64> {
                (0..k)
                    .map(|_| rng.random_range(0..20) as f64 / 4.0)
                    .collect()
            };
            let (a, b) = (draw(n), draw(m));
            let got = mia_auc(&a, &b).map_err(|e| e.to_string())?.auc;
            let want = pairwise_auc(&a, &b);
            check(got == want, || format!("case {case}: AUC {got} vs {want}"))?;
        }

        let mut worst = 0.0f64;
        for case in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + case);
            let shift = 0.05 * case as f64;
            let a: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..100).map(|_| rng.random::<f64>() + shift).collect();
            let observed = sup_cdf_gap(&a, &b);
            let lib_d = ks_statistic(&a, &b).map_err(|e| e.to_string())?;
            check((lib_d - observed).abs() < 1e-12, || {
                format!("case {case}: D {lib_d} vs {observed}")
            })?;
            let mut pool: Vec<f64> = a.iter().chain(&b).copied().collect();
            let mut hits = 0;
            for _ in 0..10_000 {
                for i in (1..pool.len()).rev() {
                    pool.swap(i, rng.random_range(0..=i));
                }
                if sup_cdf_gap_sorted(&pool[..100], &pool[100..]) >= observed - 1e-12 {
                    hits += 1;
                }
            }
            let perm_p = hits as f64 / 10_000.0;
            let p = forget_quality(&a, &b).map_err(|e| e.to_string())?;
            worst = worst.max((p - perm_p).abs());
            check((p - perm_p).abs() <= 0.02, || {
                format!("case {case}: asymptotic p {p:.4} vs permutation {perm_p:.4}")
            })?;
        }

        let auc = mia_auc(&[0.1, 0.5, 0.7], &[0.2, 0.4, 0.9])
            .map_err(|e| e.to_string())?
            .auc;
        let leak = privleak(auc, auc).map_err(|e| e.to_string())?;
        check(leak == 0.0, || format!("privleak(x, x) = {leak}"))?;
        check(t.elapsed().as_secs_f64() < 180.0, || {
            "slower than 3 min".into()
        })?;
        Ok(format!(
            "1000 LCS, 100 AUC exact; KS worst |Δp| {worst:.4}; privleak 0"
        ))
    })();
    report(5, t, outcome);
}

/// Two-sample KS statistic by merging sorted copies.
fn sup_cdf_gap_sorted(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => break,
        };
        while a.get(i).is_some_and(|&v| v <= x) {
            i += 1;
        }
        while b.get(j).is_some_and(|&v| v <= x) {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

// ------------------------------------------------------ desk experiment

const RATES: [f64; 8] = [-2.0, -0.8, -0.4, -0.2, 0.0, 0.2, 0.4, 0.8];

struct Desk {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: ExperimentConfig,
    table: SweepTable,
    seconds: f64,
}

impl Desk {
    fn baseline(&self, key: &str) -> &MetricReport {
        &self.table.baselines[key]
    }

    fn ga(&self) -> &MetricReport {
        &self.table.rows[RATES.iter().position(|r| *r == 0.0).unwrap()].report
    }

    fn best(&self) -> (f64, &MetricReport) {
        let rated: Vec<(f64, &MetricReport)> =
            self.table.rows.iter().map(|r| (r.r, &r.report)).collect();
        let i = best_r(&rated).expect("sweep has r ≠ 0 rows");
        rated[i]
    }
}

fn desk_config(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 0,
        out_dir: Some(root.to_path_buf()),
        corpus: CorpusSpec::default(),
        baselines: true,
        sweep: RATES.to_vec(),
        ..ExperimentConfig::default()
    };
    cfg.unlearn = UnlearnMethodConfig::sga(0.0, 4);
    cfg.unlearn_schedule = Schedule {
        epochs: 5,
        lr: 1.25e-3,
        batch_size: 32,
        decay: false,
    };
    cfg
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let t = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("desk");
        let cfg = desk_config(&root);
        let table = sweep_r(&cfg).expect("desk sweep");
        Desk {
            _dir: dir,
            root,
            cfg,
            table,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

fn val(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

// -------------------------------------------------- 6. SGA vs GA sweep

#[test]
fn criterion_06_sweep_beats_gradient_ascent() {
    let t = Instant::now();
    let outcome = (|| {
        let d = desk();
        let ft = d.baseline("finetuned");
        let ft_rouge = val(ft.forget_rouge);
        check(ft_rouge >= 0.9, || {
            format!("finetuned forget ROUGE-L {ft_rouge:.3} < 0.9")
        })?;
        let table: Vec<String> = d
            .table
            .rows
            .iter()
            .map(|row| {
                let m = &row.report;
                format!(
                    "r={} F-RL {:.3} R-RL {:.3} FQ {:.4} MU {:.3} PPL {:.3}",
                    row.r,
                    val(m.forget_rouge),
                    val(m.retain_rouge),
                    val(m.forget_quality),
                    val(m.model_utility),
                    val(m.perplexity)
                )
            })
            .collect();
        let table = table.join("; ");
        for row in &d.table.rows {
            check(row.error.is_none(), || {
                format!("r={} failed: {:?}", row.r, row.error)
            })?;
            let f = val(row.report.forget_rouge);
            let drop = 1.0 - f / ft_rouge;
            check(drop >= 0.5, || {
                format!(
                    "r={}: forget ROUGE-L {f:.3} drops only {:.0}% [{table}]",
                    row.r,
                    100.0 * drop
                )
            })?;
        }
        let ga = d.ga();
        let winners: Vec<f64> = d
            .table
            .rows
            .iter()
            .filter(|row| {
                row.r != 0.0
                    && val(row.report.retain_rouge) >= val(ga.retain_rouge)
                    && val(row.report.forget_quality) >= val(ga.forget_quality)
            })
            .map(|row| row.r)
            .collect();
        check(!winners.is_empty(), || {
            format!(
                "no r ≠ 0 matches GA on both R-RL {:.3} and FQ {:.4} [{table}]",
                val(ga.retain_rouge),
                val(ga.forget_quality)
            )
        })?;
        Ok(format!(
            "finetuned F-RL {ft_rouge:.3}; r beating GA: {winners:?}; desk {:.0}s [{table}]",
            d.seconds
        ))
    })();
    report(6, t, outcome);
}

// ------------------------------------------------ 7. divergence mitigation

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let dest = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_tree(&entry.path(), &dest)?;
        } else {
            std::fs::copy(entry.path(), dest)?;
        }
    }
    Ok(())
}

#[test]
fn criterion_07_extended_budget() {
    let t = Instant::now();
    let outcome = (|| {
        let d = desk();
        let (r_best, _) = d.best();
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("extended");
        for sub in ["corpus", "ckpt", "normal"] {
            copy_tree(&d.root.join(sub), &root.join(sub)).map_err(|e| e.to_string())?;
        }
        std::fs::copy(d.root.join("manifest.json"), root.join("manifest.json"))
            .map_err(|e| e.to_string())?;
        let mut cfg = d.cfg.clone();
        cfg.out_dir = Some(root);
        cfg.baselines = false;
        cfg.sweep = vec![0.0, r_best];
        cfg.unlearn_schedule.epochs = 3 * d.cfg.unlearn_schedule.epochs;
        let ext = sweep_r(&cfg).map_err(|e| e.to_string())?;
        let base_ppl = val(d.baseline("finetuned").perplexity);
        let (ga, sga) = (&ext.rows[0], &ext.rows[1]);
        let ga_ppl = val(ga.report.perplexity);
        let sga_ppl = val(sga.report.perplexity);
        let ga_ok = ga.diverged_at.is_some() || ga_ppl > 10.0 * base_ppl;
        // Matched forget ROUGE-L: within 0.05 of GA's, or lower.
        let (ga_f, sga_f) = (val(ga.report.forget_rouge), val(sga.report.forget_rouge));
        let matched = sga_f <= ga_f + 0.05;
        let detail = format!(
            "baseline PPL {base_ppl:.3}; GA PPL {ga_ppl:.3} (guard {:?}); \
             SGA r={r_best} PPL {sga_ppl:.3} F-RL {sga_f:.3} vs GA {ga_f:.3}",
            ga.diverged_at
        );
        check(ga_ok, || format!("GA stayed stable: {detail}"))?;
        check(sga.diverged_at.is_none(), || {
            format!("SGA tripped the guard: {detail}")
        })?;
        check(sga_ppl < 2.0 * base_ppl, || {
            format!("SGA PPL not below 2x baseline: {detail}")
        })?;
        check(matched, || {
            format!("SGA forget ROUGE-L not matched: {detail}")
        })?;
        Ok(detail)
    })();
    report(7, t, outcome);
}

// ------------------------------------------------------ 8. MUSE shape

#[test]
fn criterion_08_muse_shape() {
    let t = Instant::now();
    let outcome = (|| {
        let d = desk();
        let (r, best) = d.best();
        let retained = d.baseline("retained");
        let finetuned = d.baseline("finetuned");
        let detail = format!(
            "r={r}: VerbMem {:.1} (retained {:.1}), KnowMem_f {:.1} (retained {:.1}), \
             KnowMem_r {:.1}, |PrivLeak| {:.1} (finetuned {:.1})",
            val(best.verbmem),
            val(retained.verbmem),
            val(best.knowmem_forget),
            val(retained.knowmem_forget),
            val(best.knowmem_retain),
            val(best.privleak).abs(),
            val(finetuned.privleak).abs()
        );
        check(val(best.verbmem) < val(retained.verbmem), || detail.clone())?;
        check(
            val(best.knowmem_forget) < val(retained.knowmem_forget),
            || detail.clone(),
        )?;
        check(val(best.knowmem_retain) > 0.0, || detail.clone())?;
        check(
            val(best.privleak).abs() < val(finetuned.privleak).abs(),
            || detail.clone(),
        )?;
        Ok(detail)
    })();
    report(8, t, outcome);
}

// ------------------------------------------------------ 9. sign profile

#[test]
fn criterion_09_sign_profile_report() {
    let t = Instant::now();
    let outcome = (|| {
        let d = desk();
        let probe = &d.table.probe;
        let forget = read_corpus(&d.root.join("corpus/forget.jsonl"))
            .map_err(|e| e.to_string())?
            .len();
        let s = probe.profile.summary;
        check(probe.profile.rows.len() == forget, || {
            format!("{} signs for {forget} instances", probe.profile.rows.len())
        })?;
        check(s.instances == forget, || {
            format!("summary counts {}", s.instances)
        })?;
        check(s.positive + s.negative + s.zero == forget, || {
            format!("{s:?}")
        })?;
        let dir = tempfile::tempdir().unwrap();
        let (sign, rate) = (dir.path().join("sign.jsonl"), dir.path().join("rate.jsonl"));
        probe.save(&sign, &rate).map_err(|e| e.to_string())?;
        let file = std::fs::File::open(&sign).map_err(|e| e.to_string())?;
        let back =
            SignProfile::read_jsonl(std::io::BufReader::new(file)).map_err(|e| e.to_string())?;
        check(back == probe.profile, || {
            "sign profile changed on round trip".into()
        })?;
        let mut buf = Vec::new();
        back.write_jsonl(&mut buf).map_err(|e| e.to_string())?;
        check(buf == std::fs::read(&sign).unwrap(), || {
            "rewrite is not byte-identical".into()
        })?;
        check(t.elapsed().as_secs_f64() < 60.0 + d.seconds, || {
            "slower than 1 min".into()
        })?;
        Ok(format!(
            "{} instances: {} positive, {} negative, {} zero",
            s.instances, s.positive, s.negative, s.zero
        ))
    })();
    report(9, t, outcome);
}

// ------------------------------------------------------ 10. determinism

fn tiny(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 3,
        out_dir: Some(root.to_path_buf()),
        corpus: CorpusSpec {
            authors: 10,
            qa_per_author: 3,
            real_authors: 3,
            world_facts: 3,
            ..CorpusSpec::default()
        },
        model: ModelSection {
            vocab_size: 300,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 128,
        },
        finetune: Schedule {
            epochs: 2,
            lr: 3e-3,
            batch_size: 16,
            decay: true,
        },
        unlearn_schedule: Schedule {
            epochs: 1,
            lr: 1e-3,
            batch_size: 32,
            decay: false,
        },
        baselines: true,
        sweep: vec![0.0, 0.8],
        ..ExperimentConfig::default()
    };
    cfg.unlearn = UnlearnMethodConfig::sga(0.4, 4);
    cfg
}

fn files_under(root: &Path, ext: &str) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == ext) {
                let rel = p.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_10_determinism() {
    let t = Instant::now();
    let outcome = (|| {
        let mut trees = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let root = dir.path().join("run");
            let cfg = tiny(&root);
            run_pipeline(&cfg).map_err(|e| e.to_string())?;
            sweep_r(&cfg).map_err(|e| e.to_string())?;
            let mut manifests = vec![root.join("manifest.json")];
            for r in &cfg.sweep {
                manifests.push(root.join(format!("sweep/r_{r}/manifest.json")));
            }
            export_tables(&manifests, &root.join("tables")).map_err(|e| e.to_string())?;
            let mut files = files_under(&root, "json");
            files.retain(|p, _| p.file_name().is_some_and(|n| n == "manifest.json"));
            files.extend(files_under(&root, "csv"));
            trees.push((dir, files));
        }
        let (a, b) = (&trees[0].1, &trees[1].1);
        check(a.keys().eq(b.keys()), || "different file sets".into())?;
        for (p, bytes) in a {
            check(&b[p] == bytes, || format!("{} differs", p.display()))?;
        }
        let manifests = a.keys().filter(|p| p.ends_with("manifest.json")).count();
        Ok(format!(
            "{manifests} manifests and {} CSVs byte-identical",
            a.len() - manifests
        ))
    })();
    report(10, t, outcome);
}

// ---------------------------------------------------- 11. endpoint client

#[test]
fn criterion_11_endpoint_client() {
    let t = Instant::now();
    let outcome = (|| {
        let forget = QARecord::new(
            "forget-0",
            "What is the full name of the author born in Kuwait City, Kuwait on 08/09/1956?",
            "The author is Basil Mahfouz Al-Kuwaiti.",
        );
        let mut cfg = GeneratorEndpointConfig::new(
            "https://fixture.invalid/v1",
            "gpt-4o-mini",
            PromptTemplate::Tofu,
        );
        cfg.credential_env = "ULAB_ACCEPTANCE_FIXTURE_KEY".into();
        cfg.retries = 2;
        cfg.backoff_ms = 0;
        std::env::set_var(&cfg.credential_env, "fixture");

        let text = std::fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR"))
                .join("tests/fixtures/tofu_chat_completions.jsonl"),
        )
        .map_err(|e| e.to_string())?;
        let fixture = FixtureTransport::from_jsonl(&text);
        let got = generate_via_endpoint(&forget, 3, &cfg, &fixture).map_err(|e| e.to_string())?;
        check(fixture.calls() == 3, || {
            format!("{} requests", fixture.calls())
        })?;
        check(got.substitutions.is_empty(), || {
            format!("{:?}", got.substitutions)
        })?;
        let records: Vec<QARecord> = got
            .companions
            .iter()
            .enumerate()
            .map(|(i, c)| c.record(format!("{}-normal-{i}", forget.id)))
            .collect();
        check(records.len() == 3, || format!("{} records", records.len()))?;
        for (c, r) in got.companions.iter().zip(&records) {
            r.validate().map_err(|e| e.to_string())?;
            check(c.provenance == Origin::Generated, || {
                format!("{:?}", c.provenance)
            })?;
            check(r.question == forget.question, || r.question.clone())?;
            check(
                r.answer.starts_with("I") && r.answer.contains("sorry"),
                || format!("unexpected answer {:?}", r.answer),
            )?;
        }

        let failing = FailingTransport::default();
        let fb = generate_via_endpoint(&forget, 3, &cfg, &failing).map_err(|e| e.to_string())?;
        check(failing.calls() == 9, || {
            format!("{} attempts", failing.calls())
        })?;
        check(fb.substitutions.len() == 3, || {
            format!("{:?}", fb.substitutions)
        })?;
        check(fb.companions.len() == 3, || {
            format!("{} records", fb.companions.len())
        })?;
        check(fb.companions[0].answer == "I don't know.", || {
            fb.companions[0].answer.clone()
        })?;
        for (i, (c, s)) in fb.companions.iter().zip(&fb.substitutions).enumerate() {
            check(c.provenance == Origin::Fallback, || {
                format!("{:?}", c.provenance)
            })?;
            check(s.index == i && s.forget_id == forget.id, || {
                format!("{s:?}")
            })?;
        }
        Ok("3 fixture records parsed; 3 fallbacks with 3 logged substitutions".to_string())
    })();
    report(11, t, outcome);
}
