use std::path::Path;
use std::process::{Command, Output};

use emoe::io::{self, Tensor};
use emoe::{ActivationKind, FfnLayer, Matrix, Rng};

fn emoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emoe"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = emoe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Result lines, without the `#` config header.
fn body(stdout: &str) -> Vec<&str> {
    stdout.lines().filter(|l| !l.starts_with('#')).collect()
}

fn numbers(line: &str) -> Vec<f64> {
    line.split_whitespace()
        .skip(2)
        .map(|v| v.parse().unwrap())
        .collect()
}

struct Fixture {
    _dir: tempfile::TempDir,
    ffn: std::path::PathBuf,
    inputs: std::path::PathBuf,
    root: std::path::PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let mut rng = Rng::new(42);
    let layer = FfnLayer::<f64>::random(6, 12, ActivationKind::Relu, &mut rng);
    let ffn = root.join("ffn.emoe");
    io::write_ffn(&ffn, &layer).unwrap();
    let inputs = root.join("x.emoe");
    let x = Matrix::<f64>::random_normal(5, 6, 1.0, &mut rng);
    io::write_tensors(&inputs, &[("x".to_string(), Tensor::from_matrix(&x))]).unwrap();
    Fixture {
        _dir: dir,
        ffn,
        inputs,
        root,
    }
}

fn split_fixture(f: &Fixture) -> (std::path::PathBuf, std::path::PathBuf) {
    let part = f.root.join("p.part");
    let split = f.root.join("split.emoe");
    ok(&[
        "cluster",
        "--ffn",
        p(&f.ffn),
        "--experts",
        "3",
        "--seed",
        "7",
        "--out",
        p(&part),
    ]);
    ok(&[
        "split",
        "--ffn",
        p(&f.ffn),
        "--partition",
        p(&part),
        "--topk",
        "2",
        "--out",
        p(&split),
    ]);
    (part, split)
}

#[test]
fn header_lists_resolved_config() {
    let out = ok(&[
        "flops",
        "--h",
        "16",
        "--d",
        "64",
        "--experts",
        "8",
        "--topk",
        "2",
    ]);
    let header: Vec<&str> = out.lines().take_while(|l| l.starts_with('#')).collect();
    assert_eq!(
        header,
        [
            "# command = flops",
            "# h = 16",
            "# d = 64",
            "# experts = 8",
            "# topk = 2"
        ]
    );
    assert_eq!(
        body(&out),
        [
            "dense_macs 2048",
            "sparse_macs 640",
            "gate_macs 128",
            "ratio 0.3125"
        ]
    );
    let csv = ok(&[
        "flops",
        "--h",
        "16",
        "--d",
        "64",
        "--experts",
        "8",
        "--topk",
        "2",
        "--format",
        "csv",
    ]);
    assert!(body(&csv).contains(&"ratio,0.3125"));
}

#[test]
fn split_then_merge_reproduces_file() {
    let f = fixture();
    let (_, split) = split_fixture(&f);
    let merged = f.root.join("merged.emoe");
    ok(&["merge", "--emoe", p(&split), "--out", p(&merged)]);
    assert_eq!(
        std::fs::read(&f.ffn).unwrap(),
        std::fs::read(&merged).unwrap()
    );
}

#[test]
fn forward_with_all_experts_matches_dense() {
    let f = fixture();
    let (_, split) = split_fixture(&f);
    let merged = f.root.join("merged.emoe");
    ok(&["merge", "--emoe", p(&split), "--out", p(&merged)]);
    let sparse = ok(&[
        "forward",
        "--layer",
        p(&split),
        "--input",
        p(&f.inputs),
        "--policy",
        "top",
        "--topk",
        "3",
    ]);
    let dense = ok(&["forward", "--layer", p(&merged), "--input", p(&f.inputs)]);
    let s: Vec<&str> = body(&sparse)
        .into_iter()
        .filter(|l| l.starts_with("output"))
        .collect();
    let d: Vec<&str> = body(&dense)
        .into_iter()
        .filter(|l| l.starts_with("output"))
        .collect();
    assert_eq!(s.len(), 5);
    assert_eq!(s.len(), d.len());
    for (a, b) in s.iter().zip(&d) {
        let (a, b) = (numbers(a), numbers(b));
        let scale = b.iter().fold(1e-30f64, |m, v| m.max(v.abs()));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-5 * scale);
        }
    }
    assert!(body(&sparse).contains(&"selected 0 0 1 2"));
}

#[test]
fn forward_random_policy_needs_seed() {
    let f = fixture();
    let (_, split) = split_fixture(&f);
    let out = emoe(&[
        "forward",
        "--layer",
        p(&split),
        "--input",
        p(&f.inputs),
        "--policy",
        "random",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let a = ok(&[
        "forward",
        "--layer",
        p(&split),
        "--input",
        p(&f.inputs),
        "--policy",
        "random",
        "--seed",
        "3",
    ]);
    let b = ok(&[
        "forward",
        "--layer",
        p(&split),
        "--input",
        p(&f.inputs),
        "--policy",
        "random",
        "--seed",
        "3",
    ]);
    assert_eq!(a, b);
}

#[test]
fn stats_and_heatmap() {
    let f = fixture();
    let (_, split) = split_fixture(&f);
    let heat = f.root.join("heat.csv");
    let out = ok(&[
        "stats",
        "--emoe",
        p(&split),
        "--inputs",
        p(&f.inputs),
        "--topk",
        "1",
        "--heatmap-out",
        p(&heat),
        "--task",
        "probe",
    ]);
    let lines = body(&out);
    let counts: usize = lines[0]
        .split_whitespace()
        .skip(1)
        .map(|v| v.parse::<usize>().unwrap())
        .sum();
    assert_eq!(counts, 5);
    let csv = std::fs::read_to_string(&heat).unwrap();
    assert!(csv.starts_with("task,expert_0,expert_1,expert_2\nprobe,"));
}

#[test]
fn prune_keeps_requested_experts() {
    let f = fixture();
    let (_, split) = split_fixture(&f);
    let pruned = f.root.join("pruned.emoe");
    let out = ok(&[
        "prune",
        "--emoe",
        p(&split),
        "--keep",
        "0,2",
        "--out",
        p(&pruned),
    ]);
    assert_eq!(body(&out), ["experts 2", "d 8"]);
    let bad = emoe(&[
        "prune",
        "--emoe",
        p(&split),
        "--keep",
        "5",
        "--out",
        p(&pruned),
    ]);
    assert_ne!(bad.status.code(), Some(0));
}

#[test]
fn exit_codes() {
    let f = fixture();
    assert_eq!(emoe(&["nonsense"]).status.code(), Some(1));
    assert_eq!(emoe(&["flops", "--h", "16"]).status.code(), Some(1));
    assert_eq!(
        emoe(&[
            "cluster",
            "--ffn",
            p(&f.ffn),
            "--experts",
            "3",
            "--out",
            "x"
        ])
        .status
        .code(),
        Some(1)
    );
    // 12 neurons do not split into 5 equal experts.
    let part = f.root.join("p5");
    let out = emoe(&[
        "cluster",
        "--ffn",
        p(&f.ffn),
        "--experts",
        "5",
        "--seed",
        "1",
        "--out",
        p(&part),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let garbage = f.root.join("garbage.emoe");
    std::fs::write(&garbage, b"NOPE").unwrap();
    assert_eq!(
        emoe(&["merge", "--emoe", p(&garbage), "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        emoe(&["merge", "--emoe", p(&f.root.join("missing")), "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(emoe(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_convert_round_trip() {
    let f = fixture();
    let config = f.root.join("toy.cfg");
    std::fs::write(
        &config,
        "# short run\npretrain_steps = 40\nsteps = 30\nlog_window = 10\n",
    )
    .unwrap();
    let model = f.root.join("model.emoe");
    let log = f.root.join("loss.csv");
    let args = [
        "train-toy",
        "--config",
        p(&config),
        "--mode",
        "emoe",
        "--seed",
        "2",
        "--out",
        p(&model),
        "--log",
        p(&log),
        "--set",
        "topk=3",
    ];
    let first = ok(&args);
    assert!(first.lines().any(|l| l == "# topk = 3"));
    assert!(first.lines().any(|l| l == "# steps = 30"));
    let bytes = std::fs::read(&model).unwrap();
    assert_eq!(ok(&args), first);
    assert_eq!(std::fs::read(&model).unwrap(), bytes);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 31);
    let usage = std::fs::read_to_string(f.root.join("loss.csv.usage.csv")).unwrap();
    assert_eq!(usage.lines().count(), 4);

    let dense = f.root.join("dense.emoe");
    ok(&[
        "convert",
        "--model",
        p(&model),
        "--direction",
        "emoe2lora",
        "--out",
        p(&dense),
    ]);
    let again = emoe(&[
        "convert",
        "--model",
        p(&dense),
        "--direction",
        "emoe2lora",
        "--out",
        p(&dense),
    ]);
    assert_eq!(again.status.code(), Some(2));

    let m: emoe::train::ToyModel<f64> = io::read_model(&model).unwrap();
    let emoe::train::BlockLayer::Emoe(layer) = &m.blocks[0].layer else {
        panic!("expected a split block");
    };
    let part = f.root.join("block0.part");
    io::write_partition(&part, &layer.partition().unwrap()).unwrap();
    let back = f.root.join("back.emoe");
    ok(&[
        "convert",
        "--model",
        p(&dense),
        "--direction",
        "lora2emoe",
        "--partition",
        p(&part),
        "--topk",
        "3",
        "--out",
        p(&back),
    ]);
    assert_eq!(std::fs::read(&back).unwrap(), bytes);

    let bad = emoe(&[
        "train-toy",
        "--mode",
        "dense",
        "--seed",
        "1",
        "--out",
        "m",
        "--log",
        "l",
        "--set",
        "bogus=1",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}
