//! Classifier losses, the centroid (Hadamard) layer and the intra-class
//! variance term, plus the two exponential centroid updates used as
//! out-of-tape baselines.

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Matrix of class centers, one column per class: shape `[N, K]` with `N` the
/// embedding dimension.
///
/// The bank is an ordinary trainable parameter: put it on a tape with
/// [`Tape::leaf`] and let any optimizer update it.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank<T> {
    centers: Tensor<T>,
}

impl<T: Scalar> CentroidBank<T> {
    /// All-zero centers.
    pub fn zeros(embed_dim: usize, classes: usize) -> Self {
        Self {
            centers: Tensor::zeros([embed_dim, classes]).with_requires_grad(true),
        }
    }

    pub fn from_tensor(centers: Tensor<T>) -> Result<Self> {
        if centers.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "centroid_bank",
                expected: "[N,K]".into(),
                found: format!("{:?}", centers.shape()),
            });
        }
        if !centers.is_finite() {
            return Err(TensorError::NonFinite {
                op: "centroid_bank",
            });
        }
        Ok(Self {
            centers: centers.with_requires_grad(true),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.centers
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.centers
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.centers
    }

    /// Center of class `k` (column `k`).
    pub fn center(&self, k: usize) -> Vec<T> {
        let kk = self.classes();
        (0..self.embed_dim())
            .map(|n| self.centers.data()[n * kk + k])
            .collect()
    }

    fn set_center(&mut self, k: usize, values: impl IntoIterator<Item = T>) {
        let kk = self.classes();
        let data = self.centers.data_mut();
        for (n, v) in values.into_iter().enumerate() {
            data[n * kk + k] = v;
        }
    }
}

/// Per-batch loss terms. `total == l0 + lambda * l_var`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l0: f64,
    pub l_var: f64,
    pub lambda: f64,
    pub total: f64,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "labels",
            expected: format!("{rows} labels"),
            found: format!("{} labels", labels.len()),
        });
    }
    if let Some((sample, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(TensorError::LabelOutOfRange {
            sample,
            label,
            classes,
        });
    }
    Ok(())
}

/// `(rows, cols)` of a `[K]` or `[B, K]` tensor.
fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [k] => Ok((1, k)),
        [b, k] => Ok((b, k)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            expected: "[K] or [B,K]".into(),
            found: format!("{shape:?}"),
        }),
    }
}

/// Smallest target probability accepted by [`Tape::shannon_info_loss`].
pub fn underflow_floor<T: Scalar>() -> f64 {
    1e-300f64.max(T::min_positive_value().as_f64())
}

impl<T: Scalar> Tape<T> {
    /// Mean Shannon information `-(1/B) Σ log p[j, y_j]` of softmax scores,
    /// fused with the softmax for stability.
    pub fn softmax_cross_entropy(&mut self, scores: Var, labels: &[usize]) -> Result<Var> {
        let (rows, k) = matrix_dims("softmax_cross_entropy", self.shape(scores))?;
        check_labels(labels, rows, k)?;
        let s = self.data(scores);
        let mut probs = Vec::with_capacity(rows * k);
        let mut total = 0.0;
        for (row, &y) in s.chunks(k).zip(labels) {
            let max = row
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[y].as_f64();
            probs.extend(row.iter().map(|v| T::of((v.as_f64() - log_z).exp())));
        }
        let loss = Tensor::scalar(T::of(total / rows as f64));
        self.push(
            loss,
            crate::autodiff::Op::SoftmaxCrossEntropy {
                scores,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean Shannon information of already-normalized probabilities.
    pub fn shannon_info_loss(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (rows, k) = matrix_dims("shannon_info_loss", self.shape(probs))?;
        check_labels(labels, rows, k)?;
        let floor = underflow_floor::<T>();
        let p = self.data(probs);
        let mut total = 0.0;
        for (sample, (row, &y)) in p.chunks(k).zip(labels).enumerate() {
            let py = row[y].as_f64();
            if !(py >= floor) {
                return Err(TensorError::Underflow { sample, prob: py });
            }
            total -= py.ln();
        }
        let loss = Tensor::scalar(T::of(total / rows as f64));
        self.push(
            loss,
            crate::autodiff::Op::ShannonInfo {
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// The Hadamard layer: `ones ⊙ C`, which is identically `C` but routes
    /// the centers through the tape like any other layer output.
    pub fn hadamard_centers(&mut self, bank: Var) -> Result<Var> {
        let ones = self.constant(Tensor::full(self.shape(bank).to_vec(), T::one()));
        self.mul(ones, bank)
    }

    /// `(1/B) Σ_j ‖x_j − C[:, y_j]‖²` for embeddings `[B, N]` and centers `[N, K]`.
    pub fn intra_class_variance_loss(
        &mut self,
        embeddings: Var,
        centers: Var,
        labels: &[usize],
    ) -> Result<Var> {
        let (rows, n) = matrix_dims("intra_class_variance_loss", self.shape(embeddings))?;
        let k = match *self.shape(centers) {
            [nn, k] if nn == n => k,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "intra_class_variance_loss",
                    expected: format!("centers [{n},K]"),
                    found: format!("{:?}", self.shape(centers)),
                })
            }
        };
        check_labels(labels, rows, k)?;
        let x = self.data(embeddings);
        let c = self.data(centers);
        let mut total = 0.0;
        for (row, &y) in x.chunks(n).zip(labels) {
            for (d, v) in row.iter().enumerate() {
                total += (v.as_f64() - c[d * k + y].as_f64()).powi(2);
            }
        }
        let loss = Tensor::scalar(T::of(total / rows as f64));
        self.push(
            loss,
            crate::autodiff::Op::IntraClassVariance {
                embeddings,
                centers,
                labels: labels.to_vec(),
            },
        )
    }

    /// `L0 + lambda * L_var` on one tape. Without `centers` only `L0` is
    /// recorded (and `l_var` reads zero).
    pub fn combined_loss(
        &mut self,
        scores: Var,
        embeddings: Var,
        centers: Option<Var>,
        labels: &[usize],
        lambda: f64,
    ) -> Result<(Var, LossBreakdown)> {
        if !(lambda >= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "combined_loss",
                message: format!("lambda must be nonnegative, got {lambda}"),
            });
        }
        let l0 = self.softmax_cross_entropy(scores, labels)?;
        let l0_value = self.value(l0).data()[0].as_f64();
        let Some(centers) = centers else {
            let breakdown = LossBreakdown {
                l0: l0_value,
                l_var: 0.0,
                lambda,
                total: l0_value,
            };
            return Ok((l0, breakdown));
        };
        let l_var = self.intra_class_variance_loss(embeddings, centers, labels)?;
        let weighted = self.scale(l_var, T::of(lambda))?;
        let total = self.add(l0, weighted)?;
        let breakdown = LossBreakdown {
            l0: l0_value,
            l_var: self.value(l_var).data()[0].as_f64(),
            lambda,
            total: self.value(total).data()[0].as_f64(),
        };
        Ok((total, breakdown))
    }
}

pub(crate) fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &[T],
    labels: &[usize],
    g: T,
) -> Vec<T> {
    let k = probs.len() / labels.len();
    let scale = g.as_f64() / labels.len() as f64;
    let mut d: Vec<T> = probs.iter().map(|&p| T::of(p.as_f64() * scale)).collect();
    for (j, &y) in labels.iter().enumerate() {
        d[j * k + y] -= T::of(scale);
    }
    d
}

pub(crate) fn shannon_info_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    g: T,
) -> Vec<T> {
    let k = probs.numel() / labels.len();
    let scale = g.as_f64() / labels.len() as f64;
    let mut d = vec![T::zero(); probs.numel()];
    for (j, &y) in labels.iter().enumerate() {
        d[j * k + y] = T::of(-scale / probs.data()[j * k + y].as_f64());
    }
    d
}

pub(crate) fn intra_class_variance_backward<T: Scalar>(
    tape: &Tape<T>,
    embeddings: Var,
    centers: Var,
    labels: &[usize],
    g: T,
) -> Vec<(Var, Vec<T>)> {
    let x = tape.data(embeddings);
    let c = tape.data(centers);
    let k = tape.shape(centers)[1];
    let n = x.len() / labels.len();
    let scale = 2.0 * g.as_f64() / labels.len() as f64;
    let mut dx = vec![T::zero(); x.len()];
    let mut dc = vec![T::zero(); c.len()];
    for (j, &y) in labels.iter().enumerate() {
        for d in 0..n {
            let diff = T::of(scale * (x[j * n + d].as_f64() - c[d * k + y].as_f64()));
            dx[j * n + d] = diff;
            dc[d * k + y] -= diff;
        }
    }
    vec![(embeddings, dx), (centers, dc)]
}

fn check_distribution(op: &'static str, p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(TensorError::InvalidArgument {
            op,
            message: format!("not a probability distribution (sum {sum})"),
        });
    }
    Ok(())
}

fn check_pair(op: &'static str, q: &[f64], p: &[f64]) -> Result<()> {
    if q.len() != p.len() || q.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("{} entries", q.len()),
            found: format!("{} entries", p.len()),
        });
    }
    check_distribution(op, q)?;
    check_distribution(op, p)?;
    if let Some(k) = (0..q.len()).find(|&k| q[k] > 0.0 && p[k] == 0.0) {
        return Err(TensorError::InvalidArgument {
            op,
            message: format!("p[{k}] = 0 where q[{k}] > 0"),
        });
    }
    Ok(())
}

/// Shannon entropy `H(q) = Σ q_k log(1/q_k)` with `0·log 0 = 0`.
pub fn entropy(q: &[f64]) -> Result<f64> {
    check_distribution("entropy", q)?;
    Ok(q.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum())
}

/// `D_KL(q‖p) = Σ q_k log(q_k / p_k)`.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64> {
    check_pair("kl_divergence", q, p)?;
    Ok(q.iter()
        .zip(p)
        .filter(|(&qk, _)| qk > 0.0)
        .map(|(&qk, &pk)| qk * (qk / pk).ln())
        .sum())
}

/// `H(q, p) = Σ q_k log(1 / p_k)`.
pub fn cross_entropy(q: &[f64], p: &[f64]) -> Result<f64> {
    check_pair("cross_entropy", q, p)?;
    Ok(q.iter()
        .zip(p)
        .filter(|(&qk, _)| qk > 0.0)
        .map(|(&qk, &pk)| -qk * pk.ln())
        .sum())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TensorError::InvalidArgument {
            op: "centroid_update",
            message: format!("alpha {alpha} outside [0, 1]"),
        });
    }
    Ok(())
}

/// Mini-batch exponential update: every class `k` present in the batch moves
/// to `(1 − α)·C_k + α·mean{x_j : y_j = k}`. Absent classes are untouched.
///
/// `embeddings` is row-major `[B, N]`.
pub fn wen_centroid_update<T: Scalar>(
    bank: &mut CentroidBank<T>,
    embeddings: &[T],
    labels: &[usize],
    alpha: f64,
) -> Result<()> {
    check_alpha(alpha)?;
    let (n, k) = (bank.embed_dim(), bank.classes());
    if embeddings.len() != labels.len() * n {
        return Err(TensorError::ShapeMismatch {
            op: "wen_centroid_update",
            expected: format!("[{}, {n}]", labels.len()),
            found: format!("{} values", embeddings.len()),
        });
    }
    check_labels(labels, labels.len(), k)?;
    let mut sums = vec![0.0f64; n * k];
    let mut counts = vec![0usize; k];
    for (row, &y) in embeddings.chunks(n).zip(labels) {
        counts[y] += 1;
        for (d, v) in row.iter().enumerate() {
            sums[y * n + d] += v.as_f64();
        }
    }
    for class in (0..k).filter(|&c| counts[c] > 0) {
        let old = bank.center(class);
        let nk = counts[class] as f64;
        let updated: Vec<T> = old
            .iter()
            .enumerate()
            .map(|(d, c)| T::of((1.0 - alpha) * c.as_f64() + alpha / nk * sums[class * n + d]))
            .collect();
        bank.set_center(class, updated);
    }
    Ok(())
}

/// Per-sample exponential update `C_y := (1 − α)·C_y + α·x`, applied in
/// mini-batch order.
pub fn per_sample_centroid_update<T: Scalar>(
    bank: &mut CentroidBank<T>,
    embeddings: &[T],
    labels: &[usize],
    alpha: f64,
) -> Result<()> {
    check_alpha(alpha)?;
    let n = bank.embed_dim();
    if embeddings.len() != labels.len() * n {
        return Err(TensorError::ShapeMismatch {
            op: "per_sample_centroid_update",
            expected: format!("[{}, {n}]", labels.len()),
            found: format!("{} values", embeddings.len()),
        });
    }
    check_labels(labels, labels.len(), bank.classes())?;
    for (row, &y) in embeddings.chunks(n).zip(labels) {
        let updated: Vec<T> = bank
            .center(y)
            .iter()
            .zip(row)
            .map(|(c, x)| T::of((1.0 - alpha) * c.as_f64() + alpha * x.as_f64()))
            .collect();
        bank.set_center(y, updated);
    }
    Ok(())
}
