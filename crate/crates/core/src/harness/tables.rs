use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::metrics::{MetricReport, CSV_HEADER};
use crate::objectives::Method;

use super::pipeline::{method_label, RunManifest};
use super::HarnessError;

/// Column subsets of the three benchmark layouts, by header name.
pub const FLAVORS: [(&str, &[&str]); 3] = [
    ("tofu", &["FQ", "MU", "F-RL", "R-RL"]),
    ("hp", &["FQ-Gap", "PPL", "BLEU"]),
    ("muse", &["VerbMem", "KnowMem_f", "KnowMem_r", "PrivLeak"]),
];

/// Which way a column improves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Better {
    Higher,
    Lower,
    /// Closest to zero.
    NearZero,
}

pub fn column_direction(name: &str) -> Better {
    match name {
        "FQ" | "MU" | "R-RL" | "KnowMem_r" => Better::Higher,
        "PrivLeak" => Better::NearZero,
        _ => Better::Lower,
    }
}

pub fn baseline_label(key: &str) -> &str {
    match key {
        "finetuned" => "Finetuned LLM",
        "retained" => "Retained LLM",
        other => other,
    }
}

fn column(report: &MetricReport, name: &str) -> Option<f64> {
    let i = CSV_HEADER.iter().position(|h| *h == name)?;
    report.values()[i]
}

/// Parses one CSV cell back into a metric value.
pub fn parse_cell(cell: &str) -> Result<Option<f64>, HarnessError> {
    match cell {
        "n/a" => Ok(None),
        "inf" => Ok(Some(f64::INFINITY)),
        "-inf" => Ok(Some(f64::NEG_INFINITY)),
        "nan" => Ok(Some(f64::NAN)),
        s => s
            .parse()
            .map(Some)
            .map_err(|_| HarnessError::Format(format!("bad metric cell '{s}'"))),
    }
}

/// Rows whose value in `name` is among the two best, ties included.
/// Non-finite and missing values never qualify.
pub fn top2(reports: &[&MetricReport], name: &str) -> Vec<usize> {
    let dir = column_direction(name);
    let score = |v: f64| match dir {
        Better::Higher => v,
        Better::Lower => -v,
        Better::NearZero => -v.abs(),
    };
    let mut vals: Vec<(usize, f64)> = reports
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            column(r, name)
                .filter(|v| v.is_finite())
                .map(|v| (i, score(v)))
        })
        .collect();
    vals.sort_by(|a, b| b.1.total_cmp(&a.1));
    let Some(cut) = vals.get(1).or(vals.first()).map(|v| v.1) else {
        return Vec::new();
    };
    let mut out: Vec<usize> = vals.iter().filter(|v| v.1 >= cut).map(|v| v.0).collect();
    out.sort_unstable();
    out
}

/// Best smoothing rate of a sweep: among `r ≠ 0` runs, the one with the
/// most top-2 placements over the forget-quality, utility and ROUGE-L
/// columns (ranked against every run, GA included); ties go to higher MU,
/// then higher FQ, then the earlier row.
pub fn best_r(rows: &[(f64, &MetricReport)]) -> Option<usize> {
    let reports: Vec<&MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    let mut counts = vec![0usize; rows.len()];
    for name in FLAVORS[0].1 {
        for i in top2(&reports, name) {
            counts[i] += 1;
        }
    }
    let key = |i: usize| {
        let f = |v: Option<f64>| v.filter(|x| x.is_finite()).unwrap_or(f64::NEG_INFINITY);
        (
            counts[i],
            f(reports[i].model_utility),
            f(reports[i].forget_quality),
        )
    };
    (0..rows.len())
        .filter(|&i| rows[i].0 != 0.0)
        .fold(None, |best: Option<usize>, i| match best {
            None => Some(i),
            Some(b) => {
                let (kb, ki) = (key(b), key(i));
                let better =
                    ki.0 > kb.0 || (ki.0 == kb.0 && (ki.1 > kb.1 || (ki.1 == kb.1 && ki.2 > kb.2)));
                Some(if better { i } else { b })
            }
        })
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Format(e.to_string())
}

/// `Method` plus every metric column; missing values print as `n/a`.
pub fn write_report_csv(path: &Path, rows: &[(String, MetricReport)]) -> Result<(), HarnessError> {
    write_columns(path, rows, &CSV_HEADER)
}

fn write_columns(
    path: &Path,
    rows: &[(String, MetricReport)],
    columns: &[&str],
) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["Method"];
    header.extend_from_slice(columns);
    w.write_record(&header).map_err(csv_err)?;
    for (label, report) in rows {
        let cells = report.csv_row();
        let mut rec = vec![label.clone()];
        for c in columns {
            let i = CSV_HEADER
                .iter()
                .position(|h| h == c)
                .expect("known column");
            rec.push(cells[i].clone());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table written by [`write_report_csv`] or an exported flavor;
/// columns absent from the file stay `None`.
pub fn read_report_csv(path: &Path) -> Result<Vec<(String, MetricReport)>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(String::from)
        .collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let mut values = [None; 11];
        let mut label = String::new();
        for (h, cell) in header.iter().zip(rec.iter()) {
            if h == "Method" {
                label = cell.to_string();
            } else if let Some(i) = CSV_HEADER.iter().position(|c| c == h) {
                values[i] = parse_cell(cell)?;
            }
        }
        out.push((label, MetricReport::from_values(values)));
    }
    Ok(out)
}

/// One row of an exported table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub config_digest: String,
    /// Smoothing rate of an SGA row.
    pub r: Option<f64>,
    pub report: MetricReport,
}

/// Rows of every manifest, deduplicated by config digest. A manifest
/// without reports contributes one row of `n/a` cells.
pub fn collect_rows(manifests: &[RunManifest]) -> Vec<TableRow> {
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for m in manifests {
        if !seen.insert(m.config_digest.clone()) {
            continue;
        }
        let method = &m.config.unlearn;
        let sga_r = (method.method == Method::Sga).then_some(method.r);
        if m.reports.is_empty() {
            rows.push(TableRow {
                label: method_label(method),
                config_digest: m.config_digest.clone(),
                r: sga_r,
                report: MetricReport::default(),
            });
            continue;
        }
        let order = ["finetuned", "retained", "unlearned"];
        let mut keys: Vec<&String> = m.reports.keys().collect();
        keys.sort_by_key(|k| order.iter().position(|o| o == k).unwrap_or(order.len()));
        for k in keys {
            let (label, r) = if k == "unlearned" {
                (method_label(method), sga_r)
            } else {
                (baseline_label(k).to_string(), None)
            };
            rows.push(TableRow {
                label,
                config_digest: m.config_digest.clone(),
                r,
                report: m.reports[k].clone(),
            });
        }
    }
    rows
}

fn summary_text(rows: &[TableRow]) -> String {
    let mut s = String::new();
    let methods: Vec<&TableRow> = rows
        .iter()
        .filter(|r| r.label != "Finetuned LLM" && r.label != "Retained LLM")
        .collect();
    let reports: Vec<&MetricReport> = methods.iter().map(|r| &r.report).collect();
    for (flavor, cols) in FLAVORS {
        s += &format!("[{flavor}]\n");
        for c in cols {
            let names: Vec<&str> = top2(&reports, c)
                .into_iter()
                .map(|i| methods[i].label.as_str())
                .collect();
            let names = if names.is_empty() {
                "n/a".to_string()
            } else {
                names.join("; ")
            };
            s += &format!("  top-2 {c}: {names}\n");
        }
    }
    let sga: Vec<(f64, &MetricReport)> = methods
        .iter()
        .filter_map(|r| r.r.map(|x| (x, &r.report)))
        .collect();
    match best_r(&sga) {
        Some(i) => s += &format!("best r: {}\n", sga[i].0),
        None => s += "best r: n/a\n",
    }
    s
}

/// Writes `tofu.csv`, `hp.csv`, `muse.csv`, `all.csv`, the JSON Lines
/// sign profiles and token-probability reports found next to the
/// manifests, and `summary.txt`. Returns the written paths.
pub fn export_tables(
    manifest_paths: &[PathBuf],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let mut manifests = Vec::new();
    for p in manifest_paths {
        manifests.push((p.clone(), RunManifest::load(p)?));
    }
    let rows = collect_rows(&manifests.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>());
    let labelled: Vec<(String, MetricReport)> = rows
        .iter()
        .map(|r| (r.label.clone(), r.report.clone()))
        .collect();
    let mut written = Vec::new();
    for (flavor, cols) in FLAVORS {
        let p = out_dir.join(format!("{flavor}.csv"));
        write_columns(&p, &labelled, cols)?;
        written.push(p);
    }
    let p = out_dir.join("all.csv");
    write_report_csv(&p, &labelled)?;
    written.push(p);

    for (name, file) in [
        ("sign_profiles.jsonl", "sign_profile.jsonl"),
        ("token_probabilities.jsonl", "token_probs.jsonl"),
    ] {
        let mut out = String::new();
        let mut seen = BTreeSet::new();
        for (path, m) in &manifests {
            let Some(root) = path.parent() else { continue };
            let src = root.join("reports").join(file);
            if !seen.insert((m.config_digest.clone(), src.clone())) || !src.exists() {
                continue;
            }
            for line in std::fs::read_to_string(&src)?
                .lines()
                .filter(|l| !l.trim().is_empty())
            {
                let mut v: serde_json::Value = serde_json::from_str(line)
                    .map_err(|e| HarnessError::Format(format!("{}: {e}", src.display())))?;
                if let Some(obj) = v.as_object_mut() {
                    obj.insert("run".into(), m.config_digest.clone().into());
                }
                out += &v.to_string();
                out.push('\n');
            }
        }
        let p = out_dir.join(name);
        std::fs::write(&p, out)?;
        written.push(p);
    }
    let p = out_dir.join("summary.txt");
    std::fs::write(&p, summary_text(&rows))?;
    written.push(p);
    Ok(written)
}
