//! Desk-scale federated objectives with per-client stochastic-gradient oracles.
//!
//! The global loss is `f(x) = (1/N) Σ_n F_n(x)`. Each client holds a shard of
//! samples and its stochastic gradient is the gradient of one uniformly drawn
//! sample, scaled so that the mean over the shard is exactly `∇F_n`.
//!
//! * Quadratic: `F_n(x) = ½‖A_n x − b_n‖²`; the sample gradient for row `i` is
//!   `m·a_i(a_iᵀx − b_i)`.
//! * Logistic: `F_n(w) = (1/m) Σ log(1 + exp(−y_i wᵀx_i)) + (λ/2)‖w‖²` with
//!   labels `y_i ∈ {−1, +1}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::index_from_u64;
use crate::vector::ParameterVector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("at least one client is required")]
    NoClients,
    #[error("client {client} has an empty shard")]
    EmptyShard { client: usize },
    #[error("client {client} does not exist (task has {n_clients})")]
    InvalidClient { client: usize, n_clients: usize },
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Quadratic,
    Logistic,
}

/// Label-skew partition of a synthetic binary classification set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    /// Mixing weight in `[0, 1]` between a balanced label distribution and a
    /// client-specific one.
    pub skew: f64,
    pub samples_min: usize,
    pub samples_max: usize,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            skew: 0.0,
            samples_min: 8,
            samples_max: 32,
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if !(0.0..=1.0).contains(&self.skew) {
            return Err(TaskError::InvalidPartition(format!(
                "skew {} outside [0, 1]",
                self.skew
            )));
        }
        if self.samples_min == 0 {
            return Err(TaskError::InvalidPartition(
                "samples_min must be at least 1".into(),
            ));
        }
        if self.samples_max < self.samples_min {
            return Err(TaskError::InvalidPartition(
                "samples_max is below samples_min".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters of a generated quadratic task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticConfig {
    pub clients: usize,
    pub dim: usize,
    pub rows_per_client: usize,
    /// Standard deviation of the per-client perturbation of the targets.
    pub heterogeneity: f64,
    /// Residual noise of the shared targets around a planted solution.
    pub noise: f64,
    pub seed: u64,
}

impl QuadraticConfig {
    pub fn new(clients: usize, dim: usize, heterogeneity: f64, seed: u64) -> Self {
        Self {
            clients,
            dim,
            rows_per_client: 4 * dim,
            heterogeneity,
            noise: 0.1,
            seed,
        }
    }
}

/// Parameters of a generated logistic-regression task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub clients: usize,
    pub dim: usize,
    pub partition: PartitionConfig,
    /// L2 regularization weight.
    pub reg: f64,
    /// Distance of the class means from the origin.
    pub separation: f64,
    pub seed: u64,
}

impl LogisticConfig {
    pub fn new(clients: usize, dim: usize, partition: PartitionConfig, seed: u64) -> Self {
        Self {
            clients,
            dim,
            partition,
            reg: 1e-2,
            separation: 1.0,
            seed,
        }
    }
}

/// One client's samples, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl ClientShard {
    pub fn new(rows: Vec<Vec<f64>>, targets: Vec<f64>) -> Self {
        assert_eq!(rows.len(), targets.len());
        Self {
            features: rows.into_iter().flatten().collect(),
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.features.len() / self.targets.len();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn gram(&self, dim: usize) -> DMatrix<f64> {
        let a = DMatrix::from_row_slice(self.len(), dim, &self.features);
        a.transpose() * a
    }
}

/// Exact optimum of a task when it is available in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub point: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    kind: TaskKind,
    dim: usize,
    shards: Vec<ClientShard>,
    reg: f64,
    smoothness: f64,
    rank_deficient: bool,
}

impl Task {
    /// Quadratic task from explicit `(A_n, b_n)` pairs, `A_n` given by rows.
    pub fn quadratic(parts: Vec<(Vec<Vec<f64>>, Vec<f64>)>) -> Result<Self, TaskError> {
        let dim = parts
            .first()
            .and_then(|(a, _)| a.first())
            .map(Vec::len)
            .ok_or(TaskError::NoClients)?;
        let shards: Vec<ClientShard> = parts
            .into_iter()
            .map(|(a, b)| ClientShard::new(a, b))
            .collect();
        Self::from_shards(TaskKind::Quadratic, dim, shards, 0.0)
    }

    /// Logistic task from explicit shards; targets must be `±1`.
    pub fn logistic(dim: usize, shards: Vec<ClientShard>, reg: f64) -> Result<Self, TaskError> {
        Self::from_shards(TaskKind::Logistic, dim, shards, reg)
    }

    fn from_shards(
        kind: TaskKind,
        dim: usize,
        shards: Vec<ClientShard>,
        reg: f64,
    ) -> Result<Self, TaskError> {
        if dim == 0 {
            return Err(TaskError::ZeroDimension);
        }
        if shards.is_empty() {
            return Err(TaskError::NoClients);
        }
        for (client, s) in shards.iter().enumerate() {
            if s.is_empty() {
                return Err(TaskError::EmptyShard { client });
            }
            if s.features.len() != s.len() * dim {
                return Err(TaskError::DimensionMismatch {
                    expected: dim,
                    got: s.features.len() / s.len(),
                });
            }
        }
        let mut max_eig = 0.0f64;
        let mut hessian = DMatrix::<f64>::zeros(dim, dim);
        for s in &shards {
            let gram = s.gram(dim);
            let scaled = match kind {
                TaskKind::Quadratic => gram,
                TaskKind::Logistic => gram / s.len() as f64,
            };
            let eig = SymmetricEigen::new(scaled.clone()).eigenvalues.max();
            max_eig = max_eig.max(eig);
            hessian += scaled;
        }
        let smoothness = match kind {
            TaskKind::Quadratic => max_eig,
            TaskKind::Logistic => 0.25 * max_eig + reg,
        };
        let rank_deficient = kind == TaskKind::Quadratic && {
            let eig = SymmetricEigen::new(hessian).eigenvalues;
            eig.min() <= 1e-10 * eig.max().max(1.0)
        };
        Ok(Self {
            kind,
            dim,
            shards,
            reg,
            smoothness,
            rank_deficient,
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, client: usize) -> &ClientShard {
        &self.shards[client]
    }

    /// Smoothness constant `L`: exact `max_n λ_max(A_nᵀA_n)` for quadratics,
    /// `¼ max_n λ_max(X_nᵀX_n/m_n) + λ` for logistic regression.
    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    /// Set when `Σ A_nᵀA_n` is singular; the minimizer is then not unique.
    pub fn is_rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    pub fn regularization(&self) -> f64 {
        self.reg
    }

    fn check_client(&self, client: usize) -> Result<(), TaskError> {
        if client < self.shards.len() {
            Ok(())
        } else {
            Err(TaskError::InvalidClient {
                client,
                n_clients: self.shards.len(),
            })
        }
    }

    fn check_dim(&self, got: usize) -> Result<(), TaskError> {
        if got == self.dim {
            Ok(())
        } else {
            Err(TaskError::DimensionMismatch {
                expected: self.dim,
                got,
            })
        }
    }

    /// Gradient of sample `index` of `client`; averaging over the shard gives `∇F_n`.
    pub fn sample_gradient_f64(&self, client: usize, index: usize, x: &[f64]) -> Vec<f64> {
        let shard = &self.shards[client];
        let row = shard.row(index);
        let z: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        match self.kind {
            TaskKind::Quadratic => {
                let coef = shard.len() as f64 * (z - shard.target(index));
                row.iter().map(|a| coef * a).collect()
            }
            TaskKind::Logistic => {
                let y = shard.target(index);
                let coef = -y * sigmoid(-y * z);
                row.iter()
                    .zip(x)
                    .map(|(a, w)| coef * a + self.reg * w)
                    .collect()
            }
        }
    }

    /// `∇F_n(x)`, computed as the shard mean of the sample gradients.
    pub fn client_gradient_f64(&self, client: usize, x: &[f64]) -> Vec<f64> {
        let shard = &self.shards[client];
        let mut acc = vec![0.0; self.dim];
        for i in 0..shard.len() {
            for (a, g) in acc.iter_mut().zip(self.sample_gradient_f64(client, i, x)) {
                *a += g;
            }
        }
        let m = shard.len() as f64;
        acc.iter_mut().for_each(|a| *a /= m);
        acc
    }

    pub fn client_loss_f64(&self, client: usize, x: &[f64]) -> f64 {
        let shard = &self.shards[client];
        let residual =
            |i: usize| -> f64 { shard.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() };
        match self.kind {
            TaskKind::Quadratic => (0..shard.len())
                .map(|i| {
                    let r = residual(i) - shard.target(i);
                    0.5 * r * r
                })
                .sum(),
            TaskKind::Logistic => {
                let data: f64 = (0..shard.len())
                    .map(|i| softplus(-shard.target(i) * residual(i)))
                    .sum::<f64>()
                    / shard.len() as f64;
                data + 0.5 * self.reg * x.iter().map(|w| w * w).sum::<f64>()
            }
        }
    }

    pub fn loss_f64(&self, x: &[f64]) -> f64 {
        (0..self.n_clients())
            .map(|n| self.client_loss_f64(n, x))
            .sum::<f64>()
            / self.n_clients() as f64
    }

    /// `∇f(x) = (1/N) Σ ∇F_n(x)`.
    pub fn full_gradient_f64(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for n in 0..self.n_clients() {
            for (a, g) in acc.iter_mut().zip(self.client_gradient_f64(n, x)) {
                *a += g;
            }
        }
        let n = self.n_clients() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    pub fn loss(&self, x: &ParameterVector) -> f64 {
        self.loss_f64(&x.to_f64())
    }

    pub fn full_gradient(&self, x: &ParameterVector) -> Result<ParameterVector, TaskError> {
        self.check_dim(x.len())?;
        Ok(ParameterVector::from_f64(
            &self.full_gradient_f64(&x.to_f64()),
        ))
    }

    pub fn client_gradient(
        &self,
        client: usize,
        x: &ParameterVector,
    ) -> Result<ParameterVector, TaskError> {
        self.check_client(client)?;
        self.check_dim(x.len())?;
        Ok(ParameterVector::from_f64(
            &self.client_gradient_f64(client, &x.to_f64()),
        ))
    }

    /// Unbiased estimate of `∇F_n(x)` from one uniformly drawn sample
    /// (exactly one 64-bit draw from `rng`).
    pub fn stochastic_gradient<R: Rng + ?Sized>(
        &self,
        client: usize,
        x: &ParameterVector,
        rng: &mut R,
    ) -> Result<ParameterVector, TaskError> {
        self.check_client(client)?;
        self.check_dim(x.len())?;
        let index = index_from_u64(rng.next_u64(), self.shards[client].len());
        Ok(ParameterVector::from_f64(&self.sample_gradient_f64(
            client,
            index,
            &x.to_f64(),
        )))
    }

    /// Exact stochastic-gradient variance `E‖g − ∇F_n(x)‖²` over the shard.
    pub fn gradient_variance(&self, client: usize, x: &[f64]) -> f64 {
        let mean = self.client_gradient_f64(client, x);
        let m = self.shards[client].len();
        (0..m)
            .map(|i| {
                self.sample_gradient_f64(client, i, x)
                    .iter()
                    .zip(&mean)
                    .map(|(g, mu)| (g - mu) * (g - mu))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / m as f64
    }

    /// Closed-form minimizer of a quadratic task (minimum-norm when singular).
    pub fn optimum(&self) -> Option<Optimum> {
        if self.kind != TaskKind::Quadratic {
            return None;
        }
        let mut h = DMatrix::<f64>::zeros(self.dim, self.dim);
        let mut rhs = DVector::<f64>::zeros(self.dim);
        for s in &self.shards {
            let a = DMatrix::from_row_slice(s.len(), self.dim, &s.features);
            let b = DVector::from_column_slice(&s.targets);
            h += a.transpose() * &a;
            rhs += a.transpose() * b;
        }
        let point = h.pseudo_inverse(1e-12).ok()? * rhs;
        let point: Vec<f64> = point.iter().copied().collect();
        let value = self.loss_f64(&point);
        Some(Optimum { point, value })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Generates a quadratic task with a shared design matrix and per-client targets.
///
/// All clients share `A` (entries `N(0, 1/m)`), so `heterogeneity = 0` makes the
/// clients identical; larger values spread the `b_n` around a common target.
pub fn make_quadratic(config: &QuadraticConfig) -> Result<Task, TaskError> {
    if config.dim == 0 {
        return Err(TaskError::ZeroDimension);
    }
    if config.clients == 0 {
        return Err(TaskError::NoClients);
    }
    if config.rows_per_client == 0 {
        return Err(TaskError::EmptyShard { client: 0 });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let (m, d) = (config.rows_per_client, config.dim);
    let scale = 1.0 / (m as f64).sqrt();
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..d).map(|_| normal(&mut rng) * scale).collect())
        .collect();
    let planted: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let base: Vec<f64> = rows
        .iter()
        .map(|r| {
            r.iter().zip(&planted).map(|(a, b)| a * b).sum::<f64>()
                + config.noise * normal(&mut rng)
        })
        .collect();
    let parts = (0..config.clients)
        .map(|_| {
            let b = base
                .iter()
                .map(|b| b + config.heterogeneity * normal(&mut rng))
                .collect();
            (rows.clone(), b)
        })
        .collect();
    Task::quadratic(parts)
}

/// Shorthand for [`make_quadratic`] with default shard size and noise.
pub fn make_quadratic_task(
    clients: usize,
    dim: usize,
    heterogeneity: f64,
    seed: u64,
) -> Result<Task, TaskError> {
    make_quadratic(&QuadraticConfig::new(clients, dim, heterogeneity, seed))
}

/// Generates a label-skewed binary classification task.
///
/// Client `n` draws positive labels with probability
/// `(1 − skew)/2 + skew·q_n`, `q_n ~ U(0, 1)`; features are the class mean
/// `±separation·μ` plus standard normal noise.
pub fn make_logistic(config: &LogisticConfig) -> Result<Task, TaskError> {
    if config.dim == 0 {
        return Err(TaskError::ZeroDimension);
    }
    if config.clients == 0 {
        return Err(TaskError::NoClients);
    }
    config.partition.validate()?;
    let d = config.dim;
    let mut feature_rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut part_rng = ChaCha20Rng::seed_from_u64(config.partition.seed);
    let direction: Vec<f64> = {
        let v: Vec<f64> = (0..d).map(|_| normal(&mut feature_rng)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|a| config.separation * a / norm).collect()
    };
    let p = config.partition;
    let shards = (0..config.clients)
        .map(|_| {
            let q: f64 = part_rng.gen();
            let positive = (1.0 - p.skew) * 0.5 + p.skew * q;
            let count = part_rng.gen_range(p.samples_min..=p.samples_max);
            let mut rows = Vec::with_capacity(count);
            let mut labels = Vec::with_capacity(count);
            for _ in 0..count {
                let u: f64 = part_rng.gen();
                let y = if u < positive { 1.0 } else { -1.0 };
                rows.push(
                    direction
                        .iter()
                        .map(|mu| y * mu + normal(&mut feature_rng))
                        .collect(),
                );
                labels.push(y);
            }
            ClientShard::new(rows, labels)
        })
        .collect();
    Task::logistic(d, shards, config.reg)
}

/// Shorthand for [`make_logistic`] with default regularization and separation.
pub fn make_logistic_task(
    clients: usize,
    dim: usize,
    partition: PartitionConfig,
    seed: u64,
) -> Result<Task, TaskError> {
    make_logistic(&LogisticConfig::new(clients, dim, partition, seed))
}

/// Where [`estimate_constants`] places its probe points.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRegion {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl ProbeRegion {
    pub fn ball(dim: usize, radius: f64) -> Self {
        Self {
            center: vec![0.0; dim],
            radius,
        }
    }
}

/// Empirical lower bounds on `L`, `σ_ℓ²` and `G` over a probe region.
///
/// Each value is a maximum over probed points, so it can only under-estimate the
/// true constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    pub l_hat: f64,
    pub sigma2_hat: f64,
    pub g_hat: f64,
}

/// Probes gradients of every client at `probe_points` points in `region`.
///
/// `L̂` is the largest ratio `‖∇F_n(x) − ∇F_n(x′)‖/‖x − x′‖`, with `x′ − x`
/// driven by power iteration on the gradient differences so that the ratio
/// approaches the top curvature. `σ̂²` and `Ĝ` are the largest exact shard
/// variance and squared client-gradient norm seen.
pub fn estimate_constants<R: Rng + ?Sized>(
    task: &Task,
    probe_points: usize,
    region: &ProbeRegion,
    rng: &mut R,
) -> ConstantEstimates {
    let probe_points = probe_points.max(2);
    let d = task.dim();
    let step = 1e-3 * region.radius.max(1e-3);
    let mut est = ConstantEstimates {
        l_hat: 0.0,
        sigma2_hat: 0.0,
        g_hat: 0.0,
    };
    let points: Vec<Vec<f64>> = (0..probe_points)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
            let norm = z.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            let r = region.radius * rng.gen::<f64>();
            region
                .center
                .iter()
                .zip(&z)
                .map(|(c, zi)| c + r * zi / norm)
                .collect()
        })
        .collect();
    for client in 0..task.n_clients() {
        let mut direction: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        for x in &points {
            let g = task.client_gradient_f64(client, x);
            est.g_hat = est.g_hat.max(g.iter().map(|a| a * a).sum());
            est.sigma2_hat = est.sigma2_hat.max(task.gradient_variance(client, x));

            let norm = direction.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 {
                direction = (0..d).map(|_| normal(rng)).collect();
                continue;
            }
            let moved: Vec<f64> = x
                .iter()
                .zip(&direction)
                .map(|(a, v)| a + step * v / norm)
                .collect();
            let dx: f64 = x
                .iter()
                .zip(&moved)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let g2 = task.client_gradient_f64(client, &moved);
            let diff: Vec<f64> = g2.iter().zip(&g).map(|(a, b)| a - b).collect();
            let dg = diff.iter().map(|a| a * a).sum::<f64>().sqrt();
            if dx > 0.0 {
                est.l_hat = est.l_hat.max(dg / dx);
            }
            direction = diff;
        }
    }
    est
}

/// Largest coordinate error between `∇f(x)` and central differences with step
/// `h`, relative to `max(‖∇f(x)‖_∞, 1)`.
pub fn finite_difference_check(task: &Task, x: &[f64], h: f64) -> f64 {
    assert!(h > 0.0, "finite-difference step must be positive");
    let grad = task.full_gradient_f64(x);
    let scale = grad.iter().fold(1.0f64, |m, g| m.max(g.abs()));
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = task.loss_f64(&probe);
        probe[i] = x[i] - h;
        let down = task.loss_f64(&probe);
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / scale);
    }
    worst
}
