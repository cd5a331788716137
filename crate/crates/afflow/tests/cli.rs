//! End-to-end runs of the `afflow` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_afflow");

const TINY: &str = r#"
seed = 3
[model]
arch = "2(2)-16"
[train]
batch_size = 16
total_images = 64
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("spawn afflow")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup(source: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), TINY).unwrap();
    ok(dir.path(), &["gen-data", source, "--n", "256", "--size", "4", "--path", "data.afds", "--seed", "1"]);
    dir
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = setup("canonical");
    let d = dir.path();
    ok(d, &["train", "--config", "run.toml", "--data", "data.afds", "--out", "full"]);
    ok(d, &["train", "--config", "run.toml", "--data", "data.afds", "--out", "split", "--steps", "2"]);
    ok(d, &["train", "--config", "run.toml", "--data", "data.afds", "--out", "split", "--ckpt", "split/checkpoint.afck"]);
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read("full/checkpoint.afck"), read("split/checkpoint.afck"));
    assert_eq!(read("full/metrics.csv"), read("split/metrics.csv"));

    let metrics = String::from_utf8(read("full/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,nll_nats_per_dim,bits_per_dim,lr,grad_norm"));
    let steps: Vec<u64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
}

#[test]
fn sampling_and_nll_are_reproducible() {
    let dir = setup("canonical");
    let d = dir.path();
    ok(d, &["train", "--config", "run.toml", "--data", "data.afds", "--out", "run"]);
    let ck = "run/checkpoint.afck";
    ok(d, &["sample", "--ckpt", ck, "--n", "8", "--out", "a", "--seed", "4"]);
    ok(d, &["sample", "--ckpt", ck, "--n", "8", "--out", "b", "--seed", "4"]);
    assert_eq!(fs::read(d.join("a/samples.afds")).unwrap(), fs::read(d.join("b/samples.afds")).unwrap());
    let nll_a = ok(d, &["nll", "--ckpt", ck, "--data", "data.afds"]).stdout;
    let nll_b = ok(d, &["nll", "--ckpt", ck, "--data", "data.afds"]).stdout;
    assert_eq!(nll_a, nll_b);
    assert!(String::from_utf8(nll_a).unwrap().starts_with("nll_nats_per_dim "));
}

#[test]
fn zero_weight_guidance_is_plain_sampling() {
    let dir = setup("bars");
    let d = dir.path();
    fs::write(d.join("latent.toml"), format!("{TINY}[latent]\npatch = 2\nhidden = 8\nfinetune_steps = 2\n")).unwrap();
    ok(d, &["train", "--config", "latent.toml", "--data", "data.afds", "--out", "run"]);
    let ck = "run/checkpoint.afck";
    ok(d, &["sample", "--ckpt", ck, "--n", "4", "--class", "1", "--out", "plain", "--mode", "none"]);
    ok(d, &["sample", "--ckpt", ck, "--n", "4", "--class", "1", "--out", "zero", "--mode", "proposed", "--omega", "0"]);
    assert_eq!(fs::read(d.join("plain/samples.afds")).unwrap(), fs::read(d.join("zero/samples.afds")).unwrap());
    assert_eq!(fs::read(d.join("plain/sample_0000.pgm")).unwrap(), fs::read(d.join("zero/sample_0000.pgm")).unwrap());
    assert!(fs::read(d.join("plain/sample_0000.pgm")).unwrap().starts_with(b"P5\n4 4\n255\n"));
}

#[test]
fn inpainting_writes_a_trace() {
    let dir = setup("canonical");
    let d = dir.path();
    ok(d, &["train", "--config", "run.toml", "--data", "data.afds", "--out", "run"]);
    ok(d, &["inpaint", "--ckpt", "run/checkpoint.afck", "--data", "data.afds", "--mask", "1", "--chains", "3", "--iters", "5", "--out", "fill"]);
    let trace = fs::read_to_string(d.join("fill/trace.csv")).unwrap();
    assert!(trace.starts_with("chain,iter,logp,accepted,acceptance_rate_cum\n"));
    assert_eq!(trace.lines().count(), 1 + 3 * 5);
}

#[test]
fn exit_codes() {
    let dir = setup("canonical");
    let d = dir.path();
    assert_eq!(run(d, &["--help"]).status.code(), Some(0));
    assert_eq!(run(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(d, &["sample"]).status.code(), Some(1));
    assert_eq!(run(d, &["nll", "--ckpt", "missing.afck", "--data", "data.afds"]).status.code(), Some(1));
    fs::write(d.join("junk.afck"), b"AFCK\x01\x00").unwrap();
    let out = run(d, &["nll", "--ckpt", "junk.afck", "--data", "data.afds"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));
    fs::write(d.join("bad.toml"), "seed = 1\n[model]\nbogus = 2\n").unwrap();
    assert_eq!(run(d, &["train", "--config", "bad.toml", "--data", "data.afds"]).status.code(), Some(1));
    fs::write(d.join("hot.toml"), format!("{TINY}lr = 1e30\n")).unwrap();
    let out = run(d, &["train", "--config", "hot.toml", "--data", "data.afds", "--out", "hot"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
