//! Acceptance gate. Prints one `PASS`/`FAIL`/`SKIP` line per criterion and
//! exits nonzero if a gating criterion fails.
//!
//! The training reproductions (4 and 5) are reported but do not gate. Set
//! `ACCEPTANCE_FULL=1` to run criterion 5; `INTRACLASS_DATA` overrides the
//! MNIST directory (default `data/mnist` at the workspace root).

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use common::{grad_cases, random_weighted_sample, rng};
use intraclass::arch::{
    infer_shapes, mnist_arch_text, parse, ParseErrorKind, PoolRounding, Shape, ShapeBindings,
    FACE_ARCH_TEXT,
};
use intraclass::data::{load_split, LabeledDataset, Split};
use intraclass::losses::{cross_entropy, kl_divergence};
use intraclass::stats::{
    class_and_grand_means, scatter, trace, variance, within_class_covariance, within_class_variance,
};
use intraclass::train::{evaluate, fit_centroids, train, TrainConfig};
use intraclass::{Tape, Tensor};
use rand::Rng;

const IDENTITY_TOL: f64 = 1e-10;
const LOSS_EQ_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const CENTROID_TOL: f64 = 1e-2;
const CENTROID_STEPS: usize = 2000;
const CENTROID_LR: f64 = 0.01;
const NC_GAIN: f64 = 0.02;
const MAX_SCORE_PARITY: f64 = 0.01;
const SEEDS: [u64; 3] = [0, 1, 2];
const FULL_NC_CE: (f64, f64) = (0.909, 0.03);
const FULL_NC_VAR: (f64, f64) = (0.972, 0.02);
const FULL_MAX_SCORE: (f64, f64) = (0.986, 0.005);

type Check = fn() -> (Verdict, String);

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Line {
    id: u8,
    gating: bool,
    verdict: Verdict,
    detail: String,
}

fn verdict(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn identities() -> (Verdict, String) {
    let mut g = rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let s = random_weighted_sample(&mut g, 8, 5, 50);
        let v = variance(&s).unwrap();
        let cm = class_and_grand_means(&s).unwrap();
        let vw = within_class_variance(&s).unwrap();
        let between: f64 = cm
            .class_means
            .iter()
            .zip(&cm.class_masses)
            .map(|(m, p)| {
                p * m
                    .iter()
                    .zip(&cm.grand_mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum();
        let by_scatter: f64 = cm
            .classes
            .iter()
            .zip(&cm.class_masses)
            .map(|(&k, p)| p * scatter(&s.class_subsample(k).unwrap()).unwrap())
            .sum();
        for e in [
            rel(scatter(&s).unwrap(), v),
            rel(v, vw + between),
            rel(vw, trace(&within_class_covariance(&s).unwrap())),
            rel(vw, variance(&s.class_centered().unwrap()).unwrap()),
            rel(vw, by_scatter),
        ] {
            worst = worst.max(e);
        }
    }
    let mut loss_worst: f64 = 0.0;
    for _ in 0..100 {
        let k = g.gen_range(2..12);
        let y = g.gen_range(0..k);
        let scores: Vec<f64> = (0..k).map(|_| g.gen_range(-8.0..8.0)).collect();
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new([1, k], scores).unwrap());
        let p = tape.softmax(s).unwrap();
        let probs = tape.value(p).data().to_vec();
        let info = tape.shannon_info_loss(p, &[y]).unwrap();
        let info = tape.value(info).data()[0];
        let mut onehot = vec![0.0; k];
        onehot[y] = 1.0;
        loss_worst = loss_worst
            .max((info - kl_divergence(&onehot, &probs).unwrap()).abs())
            .max((info - cross_entropy(&onehot, &probs).unwrap()).abs());
    }
    (
        verdict(worst <= IDENTITY_TOL && loss_worst <= LOSS_EQ_TOL),
        format!("identity err {worst:.2e} (tol {IDENTITY_TOL:.0e}), loss equivalence err {loss_worst:.2e} (tol {LOSS_EQ_TOL:.0e})"),
    )
}

fn gradients() -> (Verdict, String) {
    let cases = grad_cases::all();
    let failed: Vec<&str> = cases
        .iter()
        .filter(|(_, r)| !r.passes())
        .map(|(n, _)| *n)
        .collect();
    let worst = cases.iter().map(|(_, r)| r.max_rel).fold(0.0, f64::max);
    let checked: usize = cases.iter().map(|(_, r)| r.checked).sum();
    let kinks: usize = cases.iter().map(|(_, r)| r.kinks).sum();
    let mut detail = format!(
        "{} cases, {checked} coordinates, {kinks} skipped at kinks, max rel err {worst:.2e} (tol {GRAD_TOL:.0e})",
        cases.len()
    );
    if !failed.is_empty() {
        detail += &format!("; failing: {}", failed.join(", "));
    }
    (verdict(failed.is_empty() && worst <= GRAD_TOL), detail)
}

fn centroid_convergence() -> (Verdict, String) {
    let mut g = rng(77);
    let centers = [[1.5, -0.5], [-1.0, 1.0], [0.5, 2.0]];
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for i in 0..300 {
        let k = i % 3;
        points.push(vec![
            centers[k][0] + g.gen_range(-0.4..0.4),
            centers[k][1] + g.gen_range(-0.4..0.4),
        ]);
        labels.push(k);
    }
    let (bank, losses) = fit_centroids(&points, &labels, 3, CENTROID_STEPS, CENTROID_LR).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let members: Vec<&Vec<f64>> = points
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == k)
            .map(|(p, _)| p)
            .collect();
        for d in 0..2 {
            let m = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
            worst = worst.max((bank.center(k)[d] - m).abs());
        }
    }
    (
        verdict(worst <= CENTROID_TOL),
        format!(
            "max coordinate gap {worst:.2e} after {CENTROID_STEPS} Adam steps at lr {CENTROID_LR} (tol {CENTROID_TOL:.0e}); L_var {:.4} -> {:.4}",
            losses[0],
            losses[losses.len() - 1]
        ),
    )
}

fn mnist_root() -> Option<PathBuf> {
    let root = std::env::var_os("INTRACLASS_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist")));
    let ok = ["train", "t10k"].iter().all(|p| {
        let f = root.join(format!("{p}-images-idx3-ubyte"));
        f.exists()
            || f.with_extension("gz").exists()
            || root.join(format!("{p}-images-idx3-ubyte.gz")).exists()
    });
    ok.then_some(root)
}

/// Seed-averaged (nearest-centroid, max-score) for λ = 0 and λ = 0.05.
fn reproduction(
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    epochs: usize,
    seeds: &[u64],
) -> [(f64, f64); 2] {
    let mut out = [(0.0, 0.0); 2];
    for (slot, lambda) in [0.0, 0.05].into_iter().enumerate() {
        for &seed in seeds {
            let cfg = TrainConfig {
                lambda,
                epochs,
                seed,
                ..TrainConfig::default()
            };
            let (net, _) = train::<f32>(&cfg, train_set, |_| {}).unwrap();
            let ev = evaluate(&net, train_set, test_set).unwrap();
            eprintln!(
                "  lambda {lambda} seed {seed}: nearest-centroid {:.4} max-score {:.4}",
                ev.nearest_centroid, ev.max_score
            );
            out[slot].0 += ev.nearest_centroid / seeds.len() as f64;
            out[slot].1 += ev.max_score / seeds.len() as f64;
        }
    }
    out
}

fn desk_reproduction() -> (Verdict, String) {
    let Some(root) = mnist_root() else {
        return (
            Verdict::Skip,
            "MNIST not found; run scripts/fetch-mnist.sh or set INTRACLASS_DATA".into(),
        );
    };
    let train_set = load_split(&root, Split::Train).unwrap().head(10_000);
    let test_set = load_split(&root, Split::Test).unwrap();
    let [(nc0, ms0), (nc1, ms1)] = reproduction(&train_set, &test_set, 5, &SEEDS);
    let gain = nc1 - nc0;
    let gap = (ms1 - ms0).abs();
    (
        verdict(gain >= NC_GAIN && gap <= MAX_SCORE_PARITY),
        format!(
            "nearest-centroid {nc0:.4} -> {nc1:.4} (gain {gain:+.4}, need >= {NC_GAIN}); max-score {ms0:.4} vs {ms1:.4} (gap {gap:.4}, need <= {MAX_SCORE_PARITY})"
        ),
    )
}

fn full_reproduction() -> (Verdict, String) {
    if std::env::var("ACCEPTANCE_FULL").as_deref() != Ok("1") {
        return (Verdict::Skip, "long job; set ACCEPTANCE_FULL=1".into());
    }
    let Some(root) = mnist_root() else {
        return (Verdict::Skip, "MNIST not found".into());
    };
    let train_set = load_split(&root, Split::Train).unwrap();
    let test_set = load_split(&root, Split::Test).unwrap();
    let [(nc0, ms0), (nc1, ms1)] = reproduction(&train_set, &test_set, 20, &SEEDS[..1]);
    let within = |v: f64, (target, tol): (f64, f64)| (v - target).abs() <= tol;
    let ok = within(nc0, FULL_NC_CE) && within(nc1, FULL_NC_VAR) && within(ms1, FULL_MAX_SCORE);
    (
        verdict(ok),
        format!(
            "nearest-centroid {nc0:.4} (target {}±{}), {nc1:.4} (target {}±{}); max-score {ms1:.4} (target {}±{}), cross-entropy run {ms0:.4}",
            FULL_NC_CE.0, FULL_NC_CE.1, FULL_NC_VAR.0, FULL_NC_VAR.1, FULL_MAX_SCORE.0, FULL_MAX_SCORE.1
        ),
    )
}

fn parser() -> (Verdict, String) {
    let mut problems = Vec::new();
    let mnist = parse(&mnist_arch_text(false)).unwrap();
    let shapes = infer_shapes(&mnist, &ShapeBindings::new(2, 10).with_input(28)).unwrap();
    let extents: Vec<usize> = shapes
        .iter()
        .filter_map(|s| match s.output {
            Shape::Spatial { h, .. } => Some(h),
            _ => None,
        })
        .collect();
    if extents != [28, 26, 24, 12, 12, 10, 8, 4, 4] {
        problems.push(format!("mnist extents {extents:?}"));
    }
    let flatten = shapes
        .iter()
        .find(|s| s.description.starts_with("dense"))
        .map(|s| s.input.numel());
    if flatten != Some(1024) {
        problems.push(format!("mnist flatten {flatten:?}"));
    }
    let face = parse(FACE_ARCH_TEXT).unwrap();
    let bindings = ShapeBindings::new(1024, 100)
        .with_input(112)
        .with_pool_rounding(PoolRounding::Floor);
    if let Err(e) = infer_shapes(&face, &bindings) {
        problems.push(format!("face shapes: {e}"));
    }
    for (name, g) in [
        ("mnist", &mnist),
        ("normalized mnist", &parse(&mnist_arch_text(true)).unwrap()),
        ("face", &face),
    ] {
        if parse(&g.to_text()).as_ref() != Ok(g) {
            problems.push(format!("{name} round-trip"));
        }
    }
    let malformed = [
        "in:yx:image(28); convolve:3x16; dense:10 ->x;",
        "in:yx:image(28); conv:3y16; dense:10 ->x;",
        "in:yx:image(28); pool:2:q; dense:10 ->x;",
        "in:yx:image(28); dense:10 ->x; dense:10 ->x;",
        "in:yx:image(28); dense:10 ->x; <-y;",
    ];
    let mut kinds = Vec::new();
    for text in malformed {
        match parse(text) {
            Ok(_) => problems.push(format!("accepted {text:?}")),
            Err(e) => kinds.push(std::mem::discriminant(&e.kind)),
        }
    }
    let expected = [
        ParseErrorKind::UnknownKind(String::new()),
        ParseErrorKind::MalformedAttribute(String::new()),
        ParseErrorKind::UnknownPoolingTechnique(String::new()),
        ParseErrorKind::DuplicateLabel(String::new()),
        ParseErrorKind::UnresolvedReference(String::new()),
    ]
    .map(|k| std::mem::discriminant(&k));
    if kinds != expected {
        problems.push("malformed inputs did not give the five categories in order".into());
    }
    let detail = if problems.is_empty() {
        format!(
            "mnist {} compute layers, face {} convolutions, 3 round-trips, 5 distinct error categories",
            mnist.compute_layers().count(),
            face.layers().iter().filter(|l| l.to_string().starts_with("conv")).count()
        )
    } else {
        problems.join("; ")
    };
    (verdict(problems.is_empty()), detail)
}

fn run_train(data: &Path, out: &Path) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_intraclass"))
        .args([
            "train",
            "--epochs",
            "2",
            "--train-limit",
            "300",
            "--test-limit",
            "100",
            "--seed",
            "11",
            "--quiet",
        ])
        .arg("--data-root")
        .arg(data)
        .arg("--out")
        .arg(out)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "train exited with {status}");
    std::fs::read(out.join("metrics.toml")).unwrap()
}

fn determinism() -> (Verdict, String) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    common::write_toy_mnist(&data, 300, 100, 3);
    let a = run_train(&data, &dir.path().join("a"));
    let b = run_train(&data, &dir.path().join("b"));
    let ckpt = |d: &str| std::fs::read(dir.path().join(d).join("model.ckpt")).unwrap();
    let same_ckpt = ckpt("a") == ckpt("b");
    (
        verdict(a == b && same_ckpt),
        format!(
            "metrics.toml {} bytes, {}; checkpoints {}",
            a.len(),
            if a == b { "identical" } else { "differ" },
            if same_ckpt { "identical" } else { "differ" }
        ),
    )
}

fn main() {
    let criteria: [(u8, &str, bool, Check); 7] = [
        (1, "identity suites", true, identities),
        (2, "gradient suite", true, gradients),
        (3, "centroid convergence", true, centroid_convergence),
        (
            4,
            "desk-scale training reproduction",
            false,
            desk_reproduction,
        ),
        (5, "full reproduction", false, full_reproduction),
        (6, "parser acceptance", true, parser),
        (7, "determinism", true, determinism),
    ];
    let mut lines = Vec::new();
    for (id, name, gating, f) in criteria {
        let start = Instant::now();
        let (verdict, detail) = f();
        let line = Line {
            id,
            gating,
            verdict,
            detail: format!("{name}: {detail} [{:.1}s]", start.elapsed().as_secs_f64()),
        };
        let tag = match line.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skip => "SKIP",
        };
        println!("{tag} {} {}", line.id, line.detail);
        lines.push(line);
    }
    let gating_failures = lines
        .iter()
        .filter(|l| l.gating && matches!(l.verdict, Verdict::Fail))
        .count();
    if gating_failures > 0 {
        println!("{gating_failures} gating criteria failed");
        std::process::exit(1);
    }
}
