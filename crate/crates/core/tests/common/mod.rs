#![allow(dead_code)]

pub mod grad_cases;

use std::path::Path;

use intraclass::stats::WeightedSample;
use intraclass::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Second, smaller step; a coordinate whose two central differences disagree
/// by more than `KINK_TOL` (relative) straddles a kink and is skipped.
pub const FD_STEP_FINE: f64 = 1e-6;
pub const KINK_TOL: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    /// Coordinates where a kink of ReLU or max pooling lies within one step.
    pub kinks: usize,
}

impl GradReport {
    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel <= REL_TOL && self.kinks * 10 <= self.checked + self.kinks
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of the scalar `f` with central differences.
/// `f` must rebuild the same computation (including any random masks) from
/// the given leaves. `per_input` limits the number of coordinates sampled
/// from each input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], per_input: Option<usize>, seed: u64, f: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).expect("scalar output");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    let mut values: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = tape
            .grad(*v)
            .map_or_else(|| vec![0.0; inputs[i].numel()], <[f64]>::to_vec);
        let n = inputs[i].numel();
        let coords: Vec<usize> = match per_input {
            Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let x = inputs[i].data()[c];
            let mut central = |h: f64| {
                values[i].data_mut()[c] = x + h;
                let fp = eval(&values);
                values[i].data_mut()[c] = x - h;
                let fm = eval(&values);
                values[i].data_mut()[c] = x;
                (fp - fm) / (2.0 * h)
            };
            let numeric = central(FD_STEP);
            let fine = central(FD_STEP_FINE);
            if (numeric - fine).abs() > KINK_TOL * numeric.abs().max(fine.abs()).max(REL_FLOOR) {
                report.kinks += 1;
                continue;
            }
            let e = rel_err(analytic[c], numeric);
            report.checked += 1;
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = Some((i, c, analytic[c], numeric));
            }
        }
    }
    report
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random weighted labeled sample: dimension ≤ `max_dim`, labels below
/// `max_classes`, at most `max_points` points.
pub fn random_weighted_sample(
    rng: &mut ChaCha8Rng,
    max_dim: usize,
    max_classes: usize,
    max_points: usize,
) -> WeightedSample {
    let n = rng.gen_range(1..=max_dim);
    let k = rng.gen_range(1..=max_classes);
    let m = rng.gen_range(1..=max_points);
    let points = (0..m)
        .map(|_| (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect())
        .collect();
    let weights = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
    let labels = (0..m).map(|_| rng.gen_range(0..k)).collect();
    WeightedSample::normalized(points, weights, Some(labels)).unwrap()
}

/// Writes an IDX image file and its label file.
pub fn write_idx(dir: &Path, prefix: &str, images: &[Vec<u8>], side: usize, labels: &[u8]) {
    let mut img = Vec::new();
    img.extend_from_slice(&0x0803u32.to_be_bytes());
    for d in [images.len(), side, side] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.iter().for_each(|i| img.extend_from_slice(i));
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    let mut lab = Vec::new();
    lab.extend_from_slice(&0x0801u32.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

/// A learnable toy digit set: each class lights a different 7x7 block of a
/// 28x28 image, with noise.
pub fn write_toy_mnist(dir: &Path, train: usize, test: usize, seed: u64) {
    let mut g = rng(seed);
    for (prefix, count) in [("train", train), ("t10k", test)] {
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = (i % 10) as u8;
            let (by, bx) = (label as usize / 4 * 7 + 3, label as usize % 4 * 7);
            let mut img = vec![0u8; 28 * 28];
            for (p, v) in img.iter_mut().enumerate() {
                let (y, x) = (p / 28, p % 28);
                let lit = (by..by + 7).contains(&y) && (bx..bx + 7).contains(&x);
                *v = if lit {
                    g.gen_range(160..=255)
                } else {
                    g.gen_range(0..40)
                };
            }
            images.push(img);
            labels.push(label);
        }
        write_idx(dir, prefix, &images, 28, &labels);
    }
}
