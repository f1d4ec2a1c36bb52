use std::path::Path;
use std::process::{Command, Output};

use ulab_core::smoothing::SignProfile;

const TINY: &str = r#"
seed = 3

[corpus]
authors = 10
qa_per_author = 3
real_authors = 3
world_facts = 3

[model]
vocab_size = 300
d_model = 16
n_layers = 1
n_heads = 2
max_seq_len = 128

[finetune]
epochs = 2
lr = 0.003
batch_size = 16

[unlearn_schedule]
epochs = 1
lr = 0.001
batch_size = 32
"#;

fn ulab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ulab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ulab")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn stages_run_one_by_one_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let common = ["--config", &cfg, "--out", out, "--method", "ga"];
    for cmd in ["synth", "finetune", "unlearn", "eval"] {
        let mut args = vec![cmd];
        args.extend_from_slice(&common);
        ok(&ulab(&args));
    }
    let stdout = ok(&ulab(&[
        "eval", "--config", &cfg, "--out", out, "--method", "ga",
    ]));
    assert!(stdout.contains("up to date"), "{stdout}");
    assert!(stdout.contains("unlearned: FQ="), "{stdout}");

    let dest = dir.path().join("tables");
    ok(&ulab(&["report", out, "--dest", dest.to_str().unwrap()]));
    let all = std::fs::read_to_string(dest.join("all.csv")).unwrap();
    assert!(all.starts_with("Method,FQ,MU,"));
    assert_eq!(all.lines().count(), 2);
    assert!(all.lines().nth(1).unwrap().starts_with("GA,"));
}

#[test]
fn missing_upstream_exits_nonzero_naming_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let res = ulab(&[
        "unlearn",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--method",
        "npo",
    ]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("unlearn"), "{err}");
    assert!(out.join("manifest.json").exists());
}

#[test]
fn overrides_reach_the_effective_config() {
    let out = ulab(&[
        "config", "--method", "sga", "--r", "-0.4", "--k", "3", "--m", "2", "--lr", "0.002",
        "--sweep", "-2,0,0.8",
    ]);
    let text = ok(&out);
    assert!(text.contains("r = -0.4"), "{text}");
    assert!(text.contains("k = 3"));
    assert!(text.contains("m = 2"));
    assert!(text.contains("lr = 0.002"));
    assert!(text.contains("sweep = [-2.0, 0.0, 0.8]"));
}

#[test]
fn invalid_overrides_are_rejected() {
    let res = ulab(&["config", "--method", "sga", "--k", "6", "--m", "3"]);
    assert!(!res.status.success());
    let res = ulab(&["config", "--method", "nonsense"]);
    assert!(!res.status.success());
}

#[test]
fn sweep_and_probe_write_tables_and_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    let stdout = ok(&ulab(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        o,
        "--method",
        "sga",
        "--sweep",
        "-0.8,0,0.8",
    ]));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("r=")).count(), 3);
    let csv = std::fs::read_to_string(out.join("reports/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    for tag in ["r_-0.8", "r_0", "r_0.8"] {
        assert!(out.join("sweep").join(tag).join("manifest.json").exists());
    }

    let stdout = ok(&ulab(&[
        "probe-r", "--config", &cfg, "--out", o, "--method", "sga",
    ]));
    assert!(stdout.contains("3 instances"), "{stdout}");
    let file = std::fs::File::open(out.join("reports/sign_profile.jsonl")).unwrap();
    let profile = SignProfile::read_jsonl(std::io::BufReader::new(file)).unwrap();
    assert_eq!(profile.rows.len(), 3);
    assert_eq!(profile.summary.instances, 3);

    let dest = dir.path().join("tables");
    ok(&ulab(&["report", o, "--dest", dest.to_str().unwrap()]));
    let summary = std::fs::read_to_string(dest.join("summary.txt")).unwrap();
    assert!(summary.contains("best r: "), "{summary}");
    assert!(!summary.contains("best r: n/a"), "{summary}");
}
