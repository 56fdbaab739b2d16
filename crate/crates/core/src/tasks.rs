//! Small differentiable objectives with analytic gradients.
//!
//! Every task is deterministic given its seed and the step index passed as
//! the batch selector: mini-batches are taken sequentially from a
//! permutation that is reshuffled once per epoch from a seeded stream.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, EfcpError, Result};
use crate::linalg::{dot, DenseMatrix};

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// A loss with an exact gradient, evaluated on the mini-batch selected by
/// step index `t`.
pub trait Task: Send + Sync {
    fn dim(&self) -> usize;

    /// Per-layer tensor shapes; their sizes sum to [`Task::dim`] and the
    /// flat parameter vector is their row-major concatenation.
    fn layer_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.dim()]]
    }

    fn initial_params(&self) -> Vec<f64>;

    fn loss(&self, theta: &[f64], t: usize) -> Result<f64>;

    fn grad(&self, theta: &[f64], t: usize) -> Result<Vec<f64>>;

    /// Loss over the whole dataset (noise-free for the quadratic).
    fn full_loss(&self, theta: &[f64]) -> Result<f64>;
}

/// Splits a flat parameter vector into per-layer slices.
pub fn split_layers<'a>(theta: &'a [f64], shapes: &[Vec<usize>]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut start = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(&theta[start..start + n]);
        start += n;
    }
    out
}

fn check_params(theta: &[f64], dim: usize) -> Result<()> {
    check_dim("task parameters", dim, theta.len())?;
    if theta.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EfcpError::NonFinite("parameters"))
    }
}

/// `L(θ) = ½ (θ − θ*)ᵀ A (θ − θ*)`, gradient optionally perturbed by
/// seeded Gaussian noise of standard deviation `noise_std`.
#[derive(Debug, Clone)]
pub struct QuadraticTask {
    pub a: DenseMatrix,
    pub theta_star: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl QuadraticTask {
    /// `A = BBᵀ + 0.1 I` with `B_ij ~ N(0, 1/d)`, `θ* ~ N(0, I)`.
    pub fn synthetic(d: usize, noise_std: f64, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(EfcpError::Parameter {
                name: "dim",
                reason: "must be at least 1".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let b = DenseMatrix::from_fn(d, d, |_, _| scale * normal(&mut rng));
        let mut a = b.matmul(&b.transpose())?;
        for i in 0..d {
            a[(i, i)] += 0.1;
        }
        let theta_star = (0..d).map(|_| normal(&mut rng)).collect();
        Ok(Self {
            a,
            theta_star,
            noise_std,
            seed,
        })
    }

    fn residual(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.theta_star)
            .map(|(a, b)| a - b)
            .collect()
    }
}

impl Task for QuadraticTask {
    fn dim(&self) -> usize {
        self.theta_star.len()
    }

    fn initial_params(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn loss(&self, theta: &[f64], _t: usize) -> Result<f64> {
        self.full_loss(theta)
    }

    fn grad(&self, theta: &[f64], t: usize) -> Result<Vec<f64>> {
        check_params(theta, self.dim())?;
        let mut g = self.a.matvec(&self.residual(theta))?;
        if self.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(t as u64 + 1);
            for gi in g.iter_mut() {
                let z: f64 = normal(&mut rng);
                *gi += self.noise_std * z;
            }
        }
        Ok(g)
    }

    fn full_loss(&self, theta: &[f64]) -> Result<f64> {
        check_params(theta, self.dim())?;
        let r = self.residual(theta);
        Ok(0.5 * dot(&r, &self.a.matvec(&r)?))
    }
}

/// Labelled feature matrix.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    /// Reads a CSV file with a header row; the column named `label` holds
    /// integer class labels and every other column is a numeric feature.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| EfcpError::Dataset(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| EfcpError::Dataset(e.to_string()))?
            .clone();
        let label_col = headers
            .iter()
            .position(|h| h.trim() == "label")
            .ok_or_else(|| EfcpError::Dataset("no `label` column in header".into()))?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| EfcpError::Dataset(e.to_string()))?;
            let mut row = Vec::with_capacity(record.len().saturating_sub(1));
            for (j, field) in record.iter().enumerate() {
                let field = field.trim();
                if j == label_col {
                    let label: usize = field.parse().map_err(|_| {
                        EfcpError::Dataset(format!("row {}: bad label `{field}`", line + 1))
                    })?;
                    labels.push(label);
                } else {
                    let v: f64 = field.parse().map_err(|_| {
                        EfcpError::Dataset(format!("row {}: bad feature `{field}`", line + 1))
                    })?;
                    if !v.is_finite() {
                        return Err(EfcpError::Dataset(format!(
                            "row {}: non-finite feature",
                            line + 1
                        )));
                    }
                    row.push(v);
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(EfcpError::Dataset("no data rows".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        Ok(Self {
            features: DenseMatrix::from_rows(&rows)?,
            labels,
            classes,
        })
    }

    /// Two Gaussian clusters separated along a random unit direction by a
    /// margin of 1.0.
    pub fn two_clusters(d: usize, n: usize, seed: u64) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(EfcpError::Parameter {
                name: "dim",
                reason: "d and n must be at least 1".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut direction: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let len = dot(&direction, &direction).sqrt();
        direction.iter_mut().for_each(|v| *v /= len);
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = usize::from(rng.random_bool(0.5));
            let mut x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let along = dot(&x, &direction);
            let offset: f64 = normal(&mut rng);
            let target = if label == 1 { 1.0 } else { -1.0 } * (0.5 + offset.abs());
            for (xi, ui) in x.iter_mut().zip(&direction) {
                *xi += (target - along) * ui;
            }
            rows.push(x);
            labels.push(label);
        }
        Ok(Self {
            features: DenseMatrix::from_rows(&rows)?,
            labels,
            classes: 2,
        })
    }

    /// `classes` Gaussian blobs with means of norm 2 in random directions.
    pub fn blobs(d: usize, n: usize, classes: usize, seed: u64) -> Result<Self> {
        if d == 0 || n == 0 || classes < 2 {
            return Err(EfcpError::Parameter {
                name: "dim",
                reason: "need d ≥ 1, n ≥ 1 and at least two classes".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                let len = dot(&v, &v).sqrt();
                v.into_iter().map(|x| 2.0 * x / len).collect()
            })
            .collect();
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.random_range(0..classes);
            rows.push(
                means[label]
                    .iter()
                    .map(|m| m + 0.5 * normal(&mut rng))
                    .collect(),
            );
            labels.push(label);
        }
        Ok(Self {
            features: DenseMatrix::from_rows(&rows)?,
            labels,
            classes,
        })
    }
}

/// Sequential mini-batches over a per-epoch seeded permutation.
#[derive(Debug, Clone)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let batch_size = batch_size.clamp(1, n.max(1));
        Self {
            n,
            batch_size,
            seed,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub fn batch(&self, t: usize) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch();
        let (epoch, b) = (t / per_epoch, t % per_epoch);
        let mut perm: Vec<usize> = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        perm.shuffle(&mut rng);
        let start = b * self.batch_size;
        perm[start..(start + self.batch_size).min(self.n)].to_vec()
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary logistic regression, `θ ∈ ℝ^d`, no intercept.
#[derive(Debug, Clone)]
pub struct LogisticTask {
    pub data: Dataset,
    pub batcher: Batcher,
}

impl LogisticTask {
    pub fn new(data: Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if data.labels.iter().any(|&y| y > 1) {
            return Err(EfcpError::Dataset(
                "logistic task needs labels in {0, 1}".into(),
            ));
        }
        let batcher = Batcher::new(data.len(), batch_size, seed);
        Ok(Self { data, batcher })
    }

    fn loss_on(&self, theta: &[f64], rows: &[usize]) -> f64 {
        let total: f64 = rows
            .iter()
            .map(|&i| {
                let z = dot(self.data.features.row(i), theta);
                softplus(z) - self.data.labels[i] as f64 * z
            })
            .sum();
        total / rows.len() as f64
    }
}

impl Task for LogisticTask {
    fn dim(&self) -> usize {
        self.data.n_features()
    }

    fn initial_params(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn loss(&self, theta: &[f64], t: usize) -> Result<f64> {
        check_params(theta, self.dim())?;
        Ok(self.loss_on(theta, &self.batcher.batch(t)))
    }

    fn grad(&self, theta: &[f64], t: usize) -> Result<Vec<f64>> {
        check_params(theta, self.dim())?;
        let rows = self.batcher.batch(t);
        let mut g = vec![0.0; self.dim()];
        for &i in &rows {
            let x = self.data.features.row(i);
            let r = sigmoid(dot(x, theta)) - self.data.labels[i] as f64;
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += r * xj;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        Ok(g)
    }

    fn full_loss(&self, theta: &[f64]) -> Result<f64> {
        check_params(theta, self.dim())?;
        let all: Vec<usize> = (0..self.data.len()).collect();
        Ok(self.loss_on(theta, &all))
    }
}

/// One-hidden-layer tanh network with a softmax cross-entropy head.
///
/// Parameters are `W₁ (h × d_in)`, `b₁ (h)`, `W₂ (c × h)`, `b₂ (c)` in that
/// order.
#[derive(Debug, Clone)]
pub struct MlpTask {
    pub data: Dataset,
    pub hidden: usize,
    pub batcher: Batcher,
    pub init_seed: u64,
}

struct MlpView<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

impl MlpTask {
    pub fn new(data: Dataset, hidden: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(EfcpError::Parameter {
                name: "hidden",
                reason: "must be at least 1".into(),
            });
        }
        let batcher = Batcher::new(data.len(), batch_size, seed);
        Ok(Self {
            data,
            hidden,
            batcher,
            init_seed: seed,
        })
    }

    fn shapes(&self) -> (usize, usize, usize) {
        (self.data.n_features(), self.hidden, self.data.classes)
    }

    fn view<'a>(&self, theta: &'a [f64]) -> MlpView<'a> {
        let (d, h, c) = self.shapes();
        let (w1, rest) = theta.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        MlpView { w1, b1, w2, b2 }
    }

    /// Hidden activations and logits for sample `i`.
    fn forward(&self, p: &MlpView, i: usize) -> (Vec<f64>, Vec<f64>) {
        let (_, h, c) = self.shapes();
        let x = self.data.features.row(i);
        let d = x.len();
        let hidden: Vec<f64> = (0..h)
            .map(|k| (dot(&p.w1[k * d..(k + 1) * d], x) + p.b1[k]).tanh())
            .collect();
        let logits = (0..c)
            .map(|k| dot(&p.w2[k * h..(k + 1) * h], &hidden) + p.b2[k])
            .collect();
        (hidden, logits)
    }

    fn sample_loss(logits: &[f64], label: usize) -> f64 {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        lse - logits[label]
    }

    fn loss_on(&self, theta: &[f64], rows: &[usize]) -> f64 {
        let p = self.view(theta);
        let total: f64 = rows
            .iter()
            .map(|&i| {
                let (_, logits) = self.forward(&p, i);
                Self::sample_loss(&logits, self.data.labels[i])
            })
            .sum();
        total / rows.len() as f64
    }
}

impl Task for MlpTask {
    fn dim(&self) -> usize {
        let (d, h, c) = self.shapes();
        h * d + h + c * h + c
    }

    fn layer_shapes(&self) -> Vec<Vec<usize>> {
        let (d, h, c) = self.shapes();
        vec![vec![h, d], vec![h], vec![c, h], vec![c]]
    }

    fn initial_params(&self) -> Vec<f64> {
        let (d, h, c) = self.shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed ^ 0x5eed_1417);
        let mut theta = Vec::with_capacity(self.dim());
        let s1 = 1.0 / (d as f64).sqrt();
        theta.extend((0..h * d).map(|_| s1 * normal(&mut rng)));
        theta.extend(std::iter::repeat_n(0.0, h));
        let s2 = 1.0 / (h as f64).sqrt();
        theta.extend((0..c * h).map(|_| s2 * normal(&mut rng)));
        theta.extend(std::iter::repeat_n(0.0, c));
        theta
    }

    fn loss(&self, theta: &[f64], t: usize) -> Result<f64> {
        check_params(theta, self.dim())?;
        Ok(self.loss_on(theta, &self.batcher.batch(t)))
    }

    fn grad(&self, theta: &[f64], t: usize) -> Result<Vec<f64>> {
        check_params(theta, self.dim())?;
        let (d, h, c) = self.shapes();
        let p = self.view(theta);
        let rows = self.batcher.batch(t);
        let mut g = vec![0.0; self.dim()];
        {
            let (gw1, rest) = g.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            for &i in &rows {
                let x = self.data.features.row(i);
                let (hidden, logits) = self.forward(&p, i);
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let mut dz: Vec<f64> = exps.iter().map(|e| e / total).collect();
                dz[self.data.labels[i]] -= 1.0;
                let mut dh = vec![0.0; h];
                for k in 0..c {
                    gb2[k] += dz[k];
                    for j in 0..h {
                        gw2[k * h + j] += dz[k] * hidden[j];
                        dh[j] += dz[k] * p.w2[k * h + j];
                    }
                }
                for j in 0..h {
                    let da = dh[j] * (1.0 - hidden[j] * hidden[j]);
                    gb1[j] += da;
                    for (gw, xv) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *gw += da * xv;
                    }
                }
            }
        }
        let inv = 1.0 / rows.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        Ok(g)
    }

    fn full_loss(&self, theta: &[f64]) -> Result<f64> {
        check_params(theta, self.dim())?;
        let all: Vec<usize> = (0..self.data.len()).collect();
        Ok(self.loss_on(theta, &all))
    }
}

/// Synthetic task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Quadratic,
    Logistic,
    Mlp,
}

/// Hidden width and class count used by [`make_synthetic`] for MLPs.
pub const SYNTHETIC_MLP_HIDDEN: usize = 16;
pub const SYNTHETIC_MLP_CLASSES: usize = 3;

/// Builds a reproducible synthetic task. `d` is the parameter dimension for
/// the quadratic, the feature count otherwise; `n` is the sample count
/// (ignored by the quadratic). Mini-batches default to the full dataset.
pub fn make_synthetic(kind: TaskKind, d: usize, n: usize, seed: u64) -> Result<Box<dyn Task>> {
    if d == 0 || n == 0 {
        return Err(EfcpError::Parameter {
            name: "dim",
            reason: format!("d and n must be positive, got d={d} n={n}"),
        });
    }
    Ok(match kind {
        TaskKind::Quadratic => Box::new(QuadraticTask::synthetic(d, 0.0, seed)?),
        TaskKind::Logistic => Box::new(LogisticTask::new(
            Dataset::two_clusters(d, n, seed)?,
            n,
            seed,
        )?),
        TaskKind::Mlp => Box::new(MlpTask::new(
            Dataset::blobs(d, n, SYNTHETIC_MLP_CLASSES, seed)?,
            SYNTHETIC_MLP_HIDDEN,
            n,
            seed,
        )?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(task: &dyn Task, theta: &[f64], t: usize, seed: u64) {
        let g = task.grad(theta, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        for _ in 0..20 {
            let i = rng.random_range(0..theta.len());
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let fd = (task.loss(&plus, t).unwrap() - task.loss(&minus, t).unwrap()) / (2.0 * h);
            let scale = g[i].abs().max(1e-3);
            assert!(
                (fd - g[i]).abs() <= 1e-5 * scale,
                "coordinate {i}: fd {fd} vs analytic {}",
                g[i]
            );
        }
    }

    fn random_theta(d: usize, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d).map(|_| scale * normal(&mut rng)).collect()
    }

    #[test]
    fn quadratic_minimum_and_closed_form() {
        let q = QuadraticTask::synthetic(10, 0.0, 3).unwrap();
        assert_eq!(q.loss(&q.theta_star, 0).unwrap(), 0.0);
        assert_eq!(q.grad(&q.theta_star, 0).unwrap(), vec![0.0; 10]);
        let theta = random_theta(10, 1, 1.0);
        let r: Vec<f64> = theta
            .iter()
            .zip(&q.theta_star)
            .map(|(a, b)| a - b)
            .collect();
        assert_eq!(q.grad(&theta, 5).unwrap(), q.a.matvec(&r).unwrap());
    }

    #[test]
    fn quadratic_is_spd() {
        let q = QuadraticTask::synthetic(12, 0.0, 8).unwrap();
        let e = crate::linalg::sym_eig(&q.a).unwrap();
        assert!(e.eigenvalues.iter().all(|&l| l >= 0.1 - 1e-10));
    }

    #[test]
    fn quadratic_noise_is_seeded_per_step() {
        let q = QuadraticTask::synthetic(5, 0.5, 4).unwrap();
        let g0 = q.grad(&q.theta_star, 0).unwrap();
        assert_eq!(g0, q.grad(&q.theta_star, 0).unwrap());
        assert_ne!(g0, q.grad(&q.theta_star, 1).unwrap());
    }

    #[test]
    fn logistic_uniform_predictor() {
        let task = make_synthetic(TaskKind::Logistic, 6, 40, 1).unwrap();
        let l = task.full_loss(&[0.0; 6]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logistic_loss_recomputation() {
        let data = Dataset::two_clusters(4, 10, 2).unwrap();
        let task = LogisticTask::new(data.clone(), 10, 2).unwrap();
        let theta = random_theta(4, 7, 1.0);
        let mut expected = 0.0;
        for i in 0..10 {
            let z: f64 = (0..4).map(|j| data.features[(i, j)] * theta[j]).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            let y = data.labels[i] as f64;
            expected -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        expected /= 10.0;
        assert!((task.full_loss(&theta).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let q = make_synthetic(TaskKind::Quadratic, 30, 1, 5).unwrap();
        fd_check(q.as_ref(), &random_theta(30, 2, 1.0), 0, 10);
        let l = make_synthetic(TaskKind::Logistic, 40, 100, 6).unwrap();
        fd_check(l.as_ref(), &random_theta(40, 3, 0.3), 0, 11);
        let m = make_synthetic(TaskKind::Mlp, 8, 60, 7).unwrap();
        let theta = m.initial_params();
        fd_check(m.as_ref(), &theta, 0, 12);
    }

    #[test]
    fn minibatch_gradient_matches_finite_differences() {
        let data = Dataset::blobs(5, 50, 4, 3).unwrap();
        let task = MlpTask::new(data, 6, 8, 3).unwrap();
        let theta = task.initial_params();
        fd_check(&task, &theta, 9, 13);
    }

    #[test]
    fn mlp_layer_shapes_cover_parameters() {
        let m = make_synthetic(TaskKind::Mlp, 8, 30, 1).unwrap();
        let total: usize = m
            .layer_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum();
        assert_eq!(total, m.dim());
        let theta = m.initial_params();
        let parts = split_layers(&theta, &m.layer_shapes());
        assert_eq!(parts.len(), 4);
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), m.dim());
    }

    #[test]
    fn synthetic_tasks_are_reproducible_and_distinct() {
        let losses: Vec<f64> = (0..3)
            .map(|seed| {
                let t = make_synthetic(TaskKind::Quadratic, 8, 1, seed).unwrap();
                t.full_loss(&[0.0; 8]).unwrap()
            })
            .collect();
        assert!(losses[0] != losses[1] && losses[1] != losses[2]);
        let again = make_synthetic(TaskKind::Quadratic, 8, 1, 1).unwrap();
        assert_eq!(again.full_loss(&[0.0; 8]).unwrap(), losses[1]);
        assert!(make_synthetic(TaskKind::Logistic, 0, 10, 1).is_err());
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let q = make_synthetic(TaskKind::Quadratic, 3, 1, 0).unwrap();
        assert!(q.loss(&[f64::NAN, 0.0, 0.0], 0).is_err());
        assert!(q.grad(&[0.0, f64::INFINITY, 0.0], 0).is_err());
    }

    #[test]
    fn batcher_covers_each_epoch() {
        let b = Batcher::new(10, 3, 4);
        assert_eq!(b.batches_per_epoch(), 4);
        let mut seen: Vec<usize> = (0..4).flat_map(|t| b.batch(t)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(b.batch(5), b.batch(5));
    }

    #[test]
    fn csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "x1,label,x2\n0.5,1,2.0\n-1.0,0,3.5\n").unwrap();
        let data = Dataset::from_csv(&path).unwrap();
        assert_eq!(data.labels, vec![1, 0]);
        assert_eq!(data.features.row(1), &[-1.0, 3.5]);
        assert_eq!(data.classes, 2);
        std::fs::write(&path, "x1,x2\n0.5,2.0\n").unwrap();
        assert!(Dataset::from_csv(&path).is_err());
        std::fs::write(&path, "x1,label\nabc,1\n").unwrap();
        assert!(Dataset::from_csv(&path).is_err());
    }
}
