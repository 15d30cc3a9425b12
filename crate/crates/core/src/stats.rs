//! Variance, scatter and within-class statistics of weighted point sets.
//!
//! Everything here works in `f64` on plain `Vec<f64>` points. Weights are
//! positive and sum to one; they can be read as probabilities or as
//! forgetting factors, the identities hold either way.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("point {index} has dimension {found}, expected {expected}")]
    Dimension {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("sample has no labels")]
    Unlabeled,
    #[error("{0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Tolerance on `Σ weights = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Points with positive weights summing to one and optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl WeightedSample {
    pub fn new(
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(StatsError::Empty);
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(StatsError::Degenerate("zero-dimensional points".into()));
        }
        if let Some((index, p)) = points.iter().enumerate().find(|(_, p)| p.len() != dim) {
            return Err(StatsError::Dimension {
                index,
                expected: dim,
                found: p.len(),
            });
        }
        if weights.len() != points.len() {
            return Err(StatsError::Weights(format!(
                "{} weights for {} points",
                weights.len(),
                points.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(StatsError::Weights("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(StatsError::Weights(format!(
                "weights sum to {total}, not 1"
            )));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(StatsError::Weights(format!(
                    "{} labels for {} points",
                    l.len(),
                    points.len()
                )));
            }
        }
        Ok(Self {
            points,
            weights,
            labels,
        })
    }

    /// Equal weights `1/M`.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let m = points.len();
        Self::new(points, vec![1.0 / m.max(1) as f64; m], None)
    }

    pub fn uniform_labeled(points: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let m = points.len();
        Self::new(points, vec![1.0 / m.max(1) as f64; m], Some(labels))
    }

    /// Normalizes arbitrary positive weights to sum one.
    pub fn normalized(
        points: Vec<Vec<f64>>,
        raw_weights: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let total: f64 = raw_weights.iter().sum();
        if !(total > 0.0) {
            return Err(StatsError::Weights("weights must be positive".into()));
        }
        Self::new(
            points,
            raw_weights.iter().map(|w| w / total).collect(),
            labels,
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Points of class `k` with weights renormalized by the class mass.
    pub fn class_subsample(&self, k: usize) -> Result<WeightedSample> {
        let labels = self.labels.as_ref().ok_or(StatsError::Unlabeled)?;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| labels[i] == k).collect();
        if idx.is_empty() {
            return Err(StatsError::Empty);
        }
        let mass: f64 = idx.iter().map(|&i| self.weights[i]).sum();
        Ok(WeightedSample {
            points: idx.iter().map(|&i| self.points[i].clone()).collect(),
            weights: idx.iter().map(|&i| self.weights[i] / mass).collect(),
            labels: Some(vec![k; idx.len()]),
        })
    }

    /// Each point minus its class mean, weights unchanged.
    pub fn class_centered(&self) -> Result<WeightedSample> {
        let means = class_and_grand_means(self)?;
        let labels = self.labels.as_ref().ok_or(StatsError::Unlabeled)?;
        let points = self
            .points
            .iter()
            .zip(labels)
            .map(|(p, l)| sub(p, means.class_mean(*l).expect("every label has a mean")))
            .collect();
        Ok(WeightedSample {
            points,
            weights: self.weights.clone(),
            labels: self.labels.clone(),
        })
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Weighted mean `Σ p(x)·x`.
pub fn mean(sample: &WeightedSample) -> Vec<f64> {
    let mut m = vec![0.0; sample.dim()];
    for (p, &w) in sample.points.iter().zip(&sample.weights) {
        m.iter_mut().zip(p).for_each(|(acc, x)| *acc += w * x);
    }
    m
}

/// `var(X) = Σ p(x)·‖x − x̄‖²`.
pub fn variance(sample: &WeightedSample) -> Result<f64> {
    if sample.is_empty() {
        return Err(StatsError::Empty);
    }
    let m = mean(sample);
    Ok(sample
        .points
        .iter()
        .zip(&sample.weights)
        .map(|(p, w)| w * sq_dist(p, &m))
        .sum())
}

/// `SCATTER(X) = ½ Σ_x Σ_y p(x)·p(y)·‖x − y‖²`.
pub fn scatter(sample: &WeightedSample) -> Result<f64> {
    if sample.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut total = 0.0;
    for (x, wx) in sample.points.iter().zip(&sample.weights) {
        for (y, wy) in sample.points.iter().zip(&sample.weights) {
            total += wx * wy * sq_dist(x, y);
        }
    }
    Ok(0.5 * total)
}

/// Weighted covariance matrix `Σ p(x)·(x − x̄)(x − x̄)ᵀ`.
pub fn covariance(sample: &WeightedSample) -> Vec<Vec<f64>> {
    let m = mean(sample);
    let d = sample.dim();
    let mut r = vec![vec![0.0; d]; d];
    for (p, &w) in sample.points.iter().zip(&sample.weights) {
        let c = sub(p, &m);
        for i in 0..d {
            for j in 0..d {
                r[i][j] += w * c[i] * c[j];
            }
        }
    }
    r
}

pub fn trace(m: &[Vec<f64>]) -> f64 {
    (0..m.len()).map(|i| m[i][i]).sum()
}

/// Per-class means and masses of a labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    /// Class ids present in the sample, ascending.
    pub classes: Vec<usize>,
    pub class_means: Vec<Vec<f64>>,
    /// `P_k = Σ_{x ∈ X_k} p(x)`.
    pub class_masses: Vec<f64>,
    pub grand_mean: Vec<f64>,
    /// Ids below the largest label that have no points; they are left out of
    /// `classes`.
    pub empty_classes: Vec<usize>,
}

impl ClassMeans {
    pub fn class_mean(&self, k: usize) -> Option<&[f64]> {
        self.classes
            .iter()
            .position(|&c| c == k)
            .map(|i| self.class_means[i].as_slice())
    }
}

/// Class means `x̄ᵏ`, masses `P_k` and the grand mean `x̄`.
pub fn class_and_grand_means(sample: &WeightedSample) -> Result<ClassMeans> {
    let labels = sample.labels.as_ref().ok_or(StatsError::Unlabeled)?;
    let d = sample.dim();
    let mut acc: BTreeMap<usize, (f64, Vec<f64>)> = BTreeMap::new();
    for ((p, &w), &l) in sample.points.iter().zip(&sample.weights).zip(labels) {
        let entry = acc.entry(l).or_insert_with(|| (0.0, vec![0.0; d]));
        entry.0 += w;
        entry.1.iter_mut().zip(p).for_each(|(s, x)| *s += w * x);
    }
    let max_label = *acc.keys().next_back().ok_or(StatsError::Empty)?;
    let empty_classes = (0..max_label).filter(|k| !acc.contains_key(k)).collect();
    let mut means = ClassMeans {
        classes: Vec::new(),
        class_means: Vec::new(),
        class_masses: Vec::new(),
        grand_mean: mean(sample),
        empty_classes,
    };
    for (k, (mass, sum)) in acc {
        means.classes.push(k);
        means
            .class_means
            .push(sum.iter().map(|s| s / mass).collect());
        means.class_masses.push(mass);
    }
    Ok(means)
}

/// `var_w(X) = Σ_k P_k·var(X_k)`.
pub fn within_class_variance(sample: &WeightedSample) -> Result<f64> {
    let means = class_and_grand_means(sample)?;
    let mut total = 0.0;
    for (&k, &mass) in means.classes.iter().zip(&means.class_masses) {
        total += mass * variance(&sample.class_subsample(k)?)?;
    }
    Ok(total)
}

/// `R_w(X) = Σ_k P_k·R(X_k)`.
pub fn within_class_covariance(sample: &WeightedSample) -> Result<Vec<Vec<f64>>> {
    let means = class_and_grand_means(sample)?;
    let d = sample.dim();
    let mut rw = vec![vec![0.0; d]; d];
    for (&k, &mass) in means.classes.iter().zip(&means.class_masses) {
        let r = covariance(&sample.class_subsample(k)?);
        for i in 0..d {
            for j in 0..d {
                rw[i][j] += mass * r[i][j];
            }
        }
    }
    Ok(rw)
}

/// All within-class quantities of one labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub means: ClassMeans,
    pub within_variance: f64,
    pub within_covariance: Vec<Vec<f64>>,
}

pub fn class_stats(sample: &WeightedSample) -> Result<ClassStats> {
    Ok(ClassStats {
        means: class_and_grand_means(sample)?,
        within_variance: within_class_variance(sample)?,
        within_covariance: within_class_covariance(sample)?,
    })
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    /// Descending.
    pub values: Vec<f64>,
    /// `vectors[i]` belongs to `values[i]`, unit length.
    pub vectors: Vec<Vec<f64>>,
}

/// Convergence threshold of [`jacobi_eigen`], relative to the Frobenius norm.
pub const JACOBI_TOL: f64 = 1e-12;

/// Cyclic Jacobi rotations until the off-diagonal mass vanishes.
pub fn jacobi_eigen(matrix: &[Vec<f64>]) -> Result<SymmetricEigen> {
    let n = matrix.len();
    if n == 0 {
        return Err(StatsError::Empty);
    }
    if matrix.iter().any(|row| row.len() != n) {
        return Err(StatsError::Degenerate("matrix is not square".into()));
    }
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (a[i][j] + a[j][i]);
            a[i][j] = avg;
            a[j][i] = avg;
        }
    }
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let frob: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = JACOBI_TOL * frob.max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                // f64::signum(0.0) == 1.0, so theta == 0 rotates by 45 degrees
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    Ok(SymmetricEigen {
        values: order.iter().map(|&i| a[i][i]).collect(),
        vectors: order
            .iter()
            .map(|&i| (0..n).map(|k| v[k][i]).collect())
            .collect(),
    })
}

/// Two-component principal projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub projected: Vec<[f64; 2]>,
}

impl Pca2 {
    pub fn project(&self, point: &[f64]) -> [f64; 2] {
        let c = sub(point, &self.mean);
        let dot = |v: &[f64]| v.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        [dot(&self.components[0]), dot(&self.components[1])]
    }
}

fn fix_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Centers the points, takes the top two covariance eigenvectors (sign fixed
/// so the first nonzero entry is positive) and projects onto them.
pub fn pca2(points: &[Vec<f64>]) -> Result<Pca2> {
    if points.len() < 2 {
        return Err(StatsError::Degenerate(
            "pca2 needs at least 2 points".into(),
        ));
    }
    let sample = WeightedSample::uniform(points.to_vec())?;
    if sample.dim() < 2 {
        return Err(StatsError::Degenerate(
            "pca2 needs dimension at least 2".into(),
        ));
    }
    let cov = covariance(&sample);
    let eig = jacobi_eigen(&cov)?;
    if eig.values[0] <= JACOBI_TOL * trace(&cov).abs().max(f64::MIN_POSITIVE)
        || eig.values[0] <= 0.0
    {
        return Err(StatsError::Degenerate(
            "rank-0 data: all points coincide".into(),
        ));
    }
    let mut c0 = eig.vectors[0].clone();
    let mut c1 = eig.vectors[1].clone();
    fix_sign(&mut c0);
    fix_sign(&mut c1);
    let mut pca = Pca2 {
        mean: mean(&sample),
        components: [c0, c1],
        eigenvalues: [eig.values[0], eig.values[1].max(0.0)],
        projected: Vec::new(),
    };
    pca.projected = points.iter().map(|p| pca.project(p)).collect();
    Ok(pca)
}
