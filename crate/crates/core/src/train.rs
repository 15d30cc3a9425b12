//! Training loop for the MNIST embedding network and the two accuracy
//! metrics.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{mnist_arch_text, parse, BuildError, Network, NetworkError, ShapeBindings};
use crate::autodiff::Tape;
use crate::data::{batch_indices, LabeledDataset, CLASSES};
use crate::losses::{per_sample_centroid_update, wen_centroid_update, CentroidBank};
use crate::optim::{Adam, AdamConfig, MomentumSgd, Optimizer};
use crate::stats::{class_and_grand_means, WeightedSample};
use crate::tensor::{Scalar, Tensor, TensorError};

pub const MSGD_MOMENTUM: f64 = 0.9;
pub const EVAL_BATCH: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "shannon")]
    Shannon,
    #[serde(rename = "shannon+var")]
    ShannonVar,
}

impl FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shannon" => Ok(Self::Shannon),
            "shannon+var" => Ok(Self::ShannonVar),
            _ => Err(format!(
                "unknown loss '{s}', expected shannon or shannon+var"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Msgd,
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(Self::Adam),
            "msgd" => Ok(Self::Msgd),
            _ => Err(format!("unknown optimizer '{s}', expected adam or msgd")),
        }
    }
}

/// How the centers move. `None` leaves them to the optimizer; the other two
/// apply an exponential update outside the tape after every batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Baseline {
    None,
    Wen(f64),
    PerSample(f64),
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::None => f.write_str("none"),
            Baseline::Wen(a) => write!(f, "wen:{a}"),
            Baseline::PerSample(a) => write!(f, "sample:{a}"),
        }
    }
}

impl FromStr for Baseline {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "none" {
            return Ok(Self::None);
        }
        let (kind, alpha) = s.split_once(':').ok_or_else(|| {
            format!("bad baseline '{s}', expected none, wen:ALPHA or sample:ALPHA")
        })?;
        let alpha: f64 = alpha
            .parse()
            .map_err(|_| format!("bad baseline rate '{alpha}'"))?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(format!("baseline rate {alpha} outside [0, 1]"));
        }
        match kind {
            "wen" => Ok(Self::Wen(alpha)),
            "sample" => Ok(Self::PerSample(alpha)),
            _ => Err(format!("unknown baseline '{kind}'")),
        }
    }
}

impl TryFrom<String> for Baseline {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Baseline> for String {
    fn from(b: Baseline) -> String {
        b.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: String,
    pub embed_dim: usize,
    pub normalize: bool,
    pub loss: LossKind,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub baseline: Baseline,
    /// Train on the first this-many samples only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    /// Evaluate on the first this-many test samples only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            embed_dim: 2,
            normalize: false,
            loss: LossKind::ShannonVar,
            lambda: 0.05,
            epochs: 20,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            baseline: Baseline::None,
            train_limit: None,
            test_limit: None,
        }
    }
}

impl TrainConfig {
    /// Names the first offending field.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(format!(
                "lambda must be a finite nonnegative number, got {}",
                self.lambda
            ));
        }
        if self.embed_dim == 0 {
            return Err("embed-dim must be positive".into());
        }
        if self.epochs == 0 {
            return Err("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch-size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!(
                "lr must be a finite positive number, got {}",
                self.lr
            ));
        }
        if self.train_limit == Some(0) {
            return Err("train-limit must be positive".into());
        }
        if self.test_limit == Some(0) {
            return Err("test-limit must be positive".into());
        }
        Ok(())
    }

    /// λ actually applied: zero for the plain classifier loss.
    pub fn effective_lambda(&self) -> f64 {
        match self.loss {
            LossKind::Shannon => 0.0,
            LossKind::ShannonVar => self.lambda,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("numerical failure at epoch {epoch}, batch {batch}: {message}")]
    Diverged {
        epoch: usize,
        batch: usize,
        message: String,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Sample-weighted means over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l0: f64,
    pub l_var: f64,
    pub total: f64,
    /// Centers after the epoch, row-major `[n, K]`.
    pub centers: Vec<f64>,
}

/// The network for `config` on `extent`-sized square images.
pub fn build_network<T: Scalar>(
    config: &TrainConfig,
    extent: usize,
) -> Result<Network<T>, TrainError> {
    let graph = parse(&mnist_arch_text(config.normalize)).expect("built-in architecture parses");
    let bindings = ShapeBindings::new(config.embed_dim, CLASSES).with_input(extent);
    Ok(Network::build(&graph, bindings, config.seed)?)
}

enum AnyOptimizer<T: Scalar> {
    Adam(Adam<T>),
    Msgd(MomentumSgd<T>),
}

impl<T: Scalar> AnyOptimizer<T> {
    fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<(), crate::optim::OptimError> {
        match self {
            AnyOptimizer::Adam(o) => o.step(params),
            AnyOptimizer::Msgd(o) => o.step(params),
        }
    }
}

/// Trains a freshly built network. `on_epoch` sees each record as it
/// completes.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    train_set: &LabeledDataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Network<T>, Vec<EpochRecord>), TrainError> {
    config.validate().map_err(TrainError::Config)?;
    let limited;
    let data = match config.train_limit {
        Some(n) if n < train_set.len() => {
            limited = train_set.head(n);
            &limited
        }
        _ => train_set,
    };
    let [_, h, w] = data.image_shape();
    if h != w {
        return Err(TrainError::Config(format!(
            "images must be square, got {h}x{w}"
        )));
    }
    let mut net = build_network::<T>(config, h)?;
    let lambda = config.effective_lambda();
    let use_var = config.loss == LossKind::ShannonVar;
    let bank_on_optimizer = use_var && config.baseline == Baseline::None;
    let mut optimizer = match config.optimizer {
        OptimizerKind::Adam => AnyOptimizer::Adam(Adam::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        })),
        OptimizerKind::Msgd => AnyOptimizer::Msgd(MomentumSgd::new(config.lr, MSGD_MOMENTUM)),
    };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(u64::MAX);

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (mut l0, mut l_var, mut total) = (0.0, 0.0, 0.0);
        for (batch, idx) in batch_indices(data.len(), config.batch_size, config.seed, epoch as u64)
            .into_iter()
            .enumerate()
        {
            let fail = |message: String| TrainError::Diverged {
                epoch: epoch + 1,
                batch,
                message,
            };
            let (images, labels) = data.gather::<T>(&idx);
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true, bank_on_optimizer);
            let x = tape.constant(images);
            let out = net
                .forward(&mut tape, &bound, x, true, &mut dropout_rng)
                .map_err(|e| fail(e.to_string()))?;
            let centers = if use_var { out.centers } else { None };
            let (loss, parts) = tape
                .combined_loss(out.scores, out.embedding, centers, &labels, lambda)
                .map_err(|e| fail(e.to_string()))?;
            tape.backward(loss).map_err(|e| fail(e.to_string()))?;
            net.collect_grads(&tape, &bound)
                .map_err(|e| fail(e.to_string()))?;
            optimizer
                .step(&mut net.trainable_mut(bank_on_optimizer))
                .map_err(|e| fail(e.to_string()))?;
            if use_var {
                let emb = tape.value(out.embedding).data();
                let bank = net.bank_mut().expect("the network has a centroid layer");
                let moved = match config.baseline {
                    Baseline::None => Ok(()),
                    Baseline::Wen(a) => wen_centroid_update(bank, emb, &labels, a),
                    Baseline::PerSample(a) => per_sample_centroid_update(bank, emb, &labels, a),
                };
                moved.map_err(|e| fail(e.to_string()))?;
            }
            let b = labels.len() as f64;
            l0 += b * parts.l0;
            l_var += b * parts.l_var;
            total += b * parts.total;
        }
        let m = data.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            l0: l0 / m,
            l_var: l_var / m,
            total: total / m,
            centers: net
                .bank()
                .map(|b| b.tensor().to_f64_vec())
                .unwrap_or_default(),
        };
        if !record.total.is_finite() {
            return Err(TrainError::Diverged {
                epoch: epoch + 1,
                batch: 0,
                message: "non-finite epoch loss".into(),
            });
        }
        on_epoch(&record);
        history.push(record);
    }
    Ok((net, history))
}

/// Inference-mode embeddings and scores for a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub dim: usize,
    pub classes: usize,
    /// Row-major `[M, dim]`.
    pub embeddings: Vec<f64>,
    /// Row-major `[M, classes]`.
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Embedded {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.embeddings
            .chunks(self.dim)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

pub fn embed<T: Scalar>(net: &Network<T>, data: &LabeledDataset) -> Result<Embedded, NetworkError> {
    let (dim, classes) = (net.embed_dim(), net.classes());
    let mut out = Embedded {
        dim,
        classes,
        embeddings: Vec::with_capacity(data.len() * dim),
        scores: Vec::with_capacity(data.len() * classes),
        labels: data.labels().to_vec(),
    };
    // dropout is inactive, so this generator is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let (images, _) = data.gather::<T>(idx);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false, false);
        let x = tape.constant(images);
        let o = net.forward(&mut tape, &bound, x, false, &mut rng)?;
        out.embeddings
            .extend(tape.value(o.embedding).data().iter().map(|v| v.as_f64()));
        out.scores
            .extend(tape.value(o.scores).data().iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

/// Per-class means of the embeddings; `None` for classes with no samples.
pub fn class_means(emb: &Embedded) -> Vec<Option<Vec<f64>>> {
    let sample = WeightedSample::uniform_labeled(emb.rows(), emb.labels.clone())
        .expect("embeddings are finite and labeled");
    let means = class_and_grand_means(&sample).expect("labeled sample");
    (0..emb.classes)
        .map(|k| means.class_mean(k).map(<[f64]>::to_vec))
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of rows whose Euclidean-nearest mean carries the right label.
pub fn nearest_mean_accuracy(means: &[Option<Vec<f64>>], emb: &Embedded) -> f64 {
    if emb.is_empty() {
        return 0.0;
    }
    let correct = (0..emb.len())
        .filter(|&i| {
            let x = emb.row(i);
            let mut best = (f64::INFINITY, usize::MAX);
            for (k, m) in means.iter().enumerate() {
                if let Some(m) = m {
                    let d = sq_dist(x, m);
                    if d < best.0 {
                        best = (d, k);
                    }
                }
            }
            best.1 == emb.labels[i]
        })
        .count();
    correct as f64 / emb.len() as f64
}

/// Fraction of rows whose largest score is at the label.
pub fn argmax_accuracy(emb: &Embedded) -> f64 {
    if emb.is_empty() {
        return 0.0;
    }
    let correct = emb
        .scores
        .chunks(emb.classes)
        .zip(&emb.labels)
        .filter(|(s, &y)| {
            let mut best = 0;
            for (k, v) in s.iter().enumerate() {
                if *v > s[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    correct as f64 / emb.len() as f64
}

/// Nearest class mean (means taken over training embeddings).
pub fn nearest_centroid_accuracy<T: Scalar>(
    net: &Network<T>,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
) -> Result<f64, NetworkError> {
    let means = class_means(&embed(net, train_set)?);
    Ok(nearest_mean_accuracy(&means, &embed(net, test_set)?))
}

pub fn max_score_accuracy<T: Scalar>(
    net: &Network<T>,
    test_set: &LabeledDataset,
) -> Result<f64, NetworkError> {
    Ok(argmax_accuracy(&embed(net, test_set)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub nearest_centroid: f64,
    pub max_score: f64,
    pub class_means: Vec<Option<Vec<f64>>>,
    /// `‖C_k − mean_k‖` for the learned centers.
    pub learned_distance: Vec<f64>,
    /// `‖mean_k‖`, the distance from the zero initialization.
    pub zero_init_distance: Vec<f64>,
}

pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
) -> Result<Evaluation, NetworkError> {
    let means = class_means(&embed(net, train_set)?);
    let test = embed(net, test_set)?;
    let centers = net.bank().map(|b| {
        (0..b.classes())
            .map(|k| b.center(k).iter().map(|v| v.as_f64()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    });
    let mut learned = Vec::new();
    let mut zero = Vec::new();
    for (k, m) in means.iter().enumerate() {
        let Some(m) = m else {
            learned.push(f64::NAN);
            zero.push(f64::NAN);
            continue;
        };
        zero.push(m.iter().map(|v| v * v).sum::<f64>().sqrt());
        learned.push(
            centers
                .as_ref()
                .map_or(f64::NAN, |c| sq_dist(&c[k], m).sqrt()),
        );
    }
    Ok(Evaluation {
        nearest_centroid: nearest_mean_accuracy(&means, &test),
        max_score: argmax_accuracy(&test),
        class_means: means,
        learned_distance: learned,
        zero_init_distance: zero,
    })
}

/// Fits centers to fixed embeddings by Adam on `L_var` alone.
pub fn fit_centroids(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    steps: usize,
    lr: f64,
) -> Result<(CentroidBank<f64>, Vec<f64>), TensorError> {
    let n = embeddings.first().map_or(0, Vec::len);
    let x = Tensor::new(
        [embeddings.len(), n],
        embeddings.iter().flatten().copied().collect(),
    )?;
    let mut bank = CentroidBank::<f64>::zeros(n, classes);
    let mut adam = Adam::with_lr(lr);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let c = tape.leaf(bank.tensor().clone());
        let centers = tape.hadamard_centers(c)?;
        let loss = tape.intra_class_variance_loss(xv, centers, labels)?;
        losses.push(tape.value(loss).data()[0]);
        tape.backward(loss)?;
        let t = bank.tensor_mut();
        t.zero_grad();
        t.accumulate_grad(tape.grad(c).expect("the bank is trainable"))?;
        adam.step(&mut [t])
            .map_err(|e| TensorError::InvalidArgument {
                op: "fit_centroids",
                message: e.to_string(),
            })?;
    }
    Ok((bank, losses))
}
