use std::path::Path;
use std::process::{Command, Output};

fn ebmforge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebmforge"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("EBMFORGE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "steps=20",
    "--batch_size=16",
    "--reservoir_capacity=64",
    "--sampler.steps=5",
    "--monitor.wall_time=false",
];

fn train_small(dir: &Path, out: &str, extra: &[&str]) -> serde_json::Value {
    let mut args = vec!["train", "--preset", "mixture-noise-reservoir", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    json(&ok(&ebmforge(&args, dir)))
}

#[test]
fn train_resume_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let last = train_small(d, "run", &["--set", "output.checkpoint_every=10"]);
    assert_eq!(last["step"], 20);
    assert!(d.join("run/metrics.csv").exists());
    assert!(d.join("run/checkpoint-00000010.ebmc").exists());

    let resumed = json(&ok(&ebmforge(&["train", "--resume", "run/checkpoint-00000010.ebmc"], d)));
    assert_eq!(resumed, last);

    let probe = json(&ok(&ebmforge(&["probe", "run/final.ebmc", "--n", "16", "--delta", "inf"], d)));
    assert_eq!(probe["noise_success"], 1.0);
    assert_eq!(probe["data_success"], 1.0);

    let samples = ok(&ebmforge(&["sample", "run/final.ebmc", "--n", "5", "--from", "reservoir"], d));
    assert_eq!(samples.lines().count(), 5);
    assert!(samples.lines().all(|l| l.split(',').count() == 2));

    let args = ["sample", "run/final.ebmc", "--n", "3", "--steps", "4", "--trace", "trace.csv"];
    let finals = ok(&ebmforge(&args, d));
    let trace = std::fs::read_to_string(d.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,chain,x0,x1"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5 * 3);
    for (i, last) in rows[12..].iter().enumerate() {
        assert_eq!(last.splitn(3, ',').nth(2), finals.lines().nth(i));
    }

    let grid = ok(&ebmforge(&["dump-grid", "run/final.ebmc", "--resolution", "4", "--lo", "-1"], d));
    assert_eq!(grid.lines().next(), Some("x,y,E"));
    assert_eq!(grid.lines().count(), 17);

    ok(&ebmforge(&["buffer", "save", "run/final.ebmc", "buf.ebmr"], d));
    let summary = ok(&ebmforge(&["buffer", "load", "buf.ebmr"], d));
    assert!(summary.starts_with("capacity 64 len 64 dim 2"), "{}", summary);
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |seed: Option<&str>, out: &str| {
        let mut args = vec!["train", "--preset", "mixture-noise-reservoir", "--out", out];
        args.extend_from_slice(SMALL);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ebmforge"));
        cmd.args(&args).current_dir(d).env("RUST_LOG", "warn").env_remove("EBMFORGE_SEED");
        if let Some(s) = seed {
            cmd.env("EBMFORGE_SEED", s);
        }
        json(&ok(&cmd.output().unwrap()))
    };
    let a = run(Some("9"), "a");
    let b = run(Some("9"), "b");
    let c = run(None, "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let explicit = train_small(d, "e", &["--set", "seed=9"]);
    assert_eq!(explicit, a);
}

#[test]
fn grad_audit_writes_one_record_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["grad-audit", "--preset", "grid-oracle", "--steps", "3", "--nodes", "41", "--batch_size=32"];
    let text = ok(&ebmforge(&args, dir.path()));
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for (i, r) in lines[..3].iter().enumerate() {
        assert_eq!(r["step"], i as u64 + 1);
        assert!(r["grad_positive"].as_f64().unwrap() >= 0.0);
        assert!(r["cosine"].as_f64().unwrap().abs() <= 1.0 + 1e-12);
    }
    assert!(lines[3]["mean_cosine"].is_number());
}

#[test]
fn config_prints_resolved_toml() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let text = ok(&ebmforge(&["config", "--preset", "gaussian-mle", "--optimizer.lr=0.25"], d));
    std::fs::write(d.join("exp.toml"), &text).unwrap();
    let again = ok(&ebmforge(&["config", "--config", "exp.toml"], d));
    assert_eq!(text, again);
    let table: toml::Table = text.parse().unwrap();
    assert_eq!(table["optimizer"]["lr"].as_float(), Some(0.25));
}

#[test]
fn entropy_check_is_close() {
    let dir = tempfile::tempdir().unwrap();
    let v = json(&ok(&ebmforge(&["entropy-check"], dir.path())));
    assert!(v["error"].as_f64().unwrap().abs() < 0.05);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ebmforge(&["train", "--preset", "nope"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));

    let out = ebmforge(&["train", "--preset", "gaussian-mle", "--set", "optimizer.nonsense=1"], d);
    assert!(!out.status.success());

    std::fs::write(d.join("x.ebmc"), b"not a checkpoint").unwrap();
    let out = ebmforge(&["probe", "x.ebmc"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("exp.toml"),
        r#"
name = "tiny"
steps = 3
batch_size = 8

[dataset]
kind = "gaussian"
mean = [0.5, -0.5]
std = 1.0
count = 64

[energy]
kind = "mlp"
hidden = [4]

[sampler]
step_size = 0.1
noise_std = 0.1
steps = 4

[init]
kind = "data_cd"

[objective]
variant = { kind = "cd_star" }
"#,
    )
    .unwrap();
    let v = json(&ok(&ebmforge(&["train", "--config", "exp.toml", "--set", "steps=4"], d)));
    assert_eq!(v["step"], 4);
}
