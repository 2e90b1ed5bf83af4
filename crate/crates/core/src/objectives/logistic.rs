use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_client, check_dim, dirichlet_partition, power_iteration, DirichletPartition, Objective};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, ParamVector};
use crate::rng::{Stream, Streams};

/// Binary logistic regression on one client's samples.
#[derive(Debug, Clone)]
pub struct LogisticShard {
    /// `samples × d`.
    pub features: DenseMatrix,
    /// 0.0 or 1.0 per sample.
    pub labels: Vec<f64>,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticShard {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Mean binary cross-entropy with logits `xᵀa`.
    pub fn loss(&self, x: &[f64]) -> Result<f64> {
        let logits = self.features.matvec(x)?;
        let mut acc = 0.0;
        for (z, y) in logits.iter().zip(&self.labels) {
            acc += softplus(*z) - y * z;
        }
        Ok(acc / self.len() as f64)
    }

    fn grad_over(&self, x: &[f64], samples: impl Iterator<Item = usize>) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let mut count = 0usize;
        for s in samples {
            let row = self.features.row(s);
            let err = sigmoid(linalg::dot_slices(row, x)) - self.labels[s];
            for (g, a) in grad.iter_mut().zip(row) {
                *g += err * a;
            }
            count += 1;
        }
        grad.iter_mut().for_each(|g| *g /= count as f64);
        grad
    }

    pub fn accuracy(&self, x: &[f64]) -> Result<f64> {
        let logits = self.features.matvec(x)?;
        let hits = logits
            .iter()
            .zip(&self.labels)
            .filter(|(z, y)| (**z > 0.0) == (**y > 0.5))
            .count();
        Ok(hits as f64 / self.len() as f64)
    }
}

/// Generation knobs for [`make_logistic_family`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticParams {
    pub n: usize,
    pub d: usize,
    pub samples_per_client: usize,
    /// Fraction of coordinates that are rare (mostly zero) features.
    pub sparsity: f64,
    /// Probability that a rare feature is active in a sample.
    pub rare_rate: f64,
    /// Dirichlet concentration of the label split across clients.
    pub alpha: f64,
    /// Std of the Gaussian noise added to the ground-truth margin.
    pub label_noise: f64,
    pub test_samples: usize,
    pub seed: u64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            n: 100,
            d: 100,
            samples_per_client: 20,
            sparsity: 0.9,
            rare_rate: 0.05,
            alpha: 0.5,
            label_noise: 0.5,
            test_samples: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFamily {
    shards: Vec<LogisticShard>,
    test: LogisticShard,
    partition: DirichletPartition,
    dim: usize,
    smoothness: f64,
}

impl LogisticFamily {
    pub fn shards(&self) -> &[LogisticShard] {
        &self.shards
    }

    pub fn partition(&self) -> &DirichletPartition {
        &self.partition
    }
}

/// Attempts at drawing a partition in which every client holds a sample.
const PARTITION_ATTEMPTS: u64 = 1000;

/// Sparse-feature binary classification split non-iid across clients.
///
/// The first `round((1 − sparsity)·d)` coordinates are dense standard normal
/// features; the rest are active with probability `rare_rate`. Labels come
/// from a ground-truth linear model whose rare-feature weights are larger, so
/// the rare coordinates carry real signal. Samples are dealt to clients by a
/// Dirichlet label split, redrawn until no client is empty.
pub fn make_logistic_family(params: &LogisticParams) -> Result<LogisticFamily> {
    let p = params;
    if p.n == 0 || p.d == 0 || p.samples_per_client == 0 || p.test_samples == 0 {
        return Err(Error::invalid(
            "logistic family needs n, d, samples_per_client, test_samples >= 1",
        ));
    }
    if !(0.0..=1.0).contains(&p.sparsity) || !(p.rare_rate > 0.0 && p.rare_rate <= 1.0) {
        return Err(Error::invalid("sparsity must lie in [0, 1] and rare_rate in (0, 1]"));
    }
    if !(p.label_noise >= 0.0) || !p.label_noise.is_finite() {
        return Err(Error::invalid("label_noise must be finite and nonnegative"));
    }
    let streams = Streams::new(p.seed);
    let dense = ((1.0 - p.sparsity) * p.d as f64).round() as usize;

    let mut rng = streams.named("logistic/truth", 0);
    let truth: Vec<f64> = (0..p.d)
        .map(|j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            if j < dense {
                z
            } else {
                3.0 * z
            }
        })
        .collect();

    let draw = |count: usize, rng: &mut Stream| -> (Vec<f64>, Vec<f64>) {
        let mut features = Vec::with_capacity(count * p.d);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let row: Vec<f64> = (0..p.d)
                .map(|j| {
                    let active = j < dense || rng.random::<f64>() < p.rare_rate;
                    if active {
                        StandardNormal.sample(rng)
                    } else {
                        0.0
                    }
                })
                .collect();
            let noise: f64 = StandardNormal.sample(rng);
            let margin = linalg::dot_slices(&row, &truth) + p.label_noise * noise;
            labels.push(if margin > 0.0 { 1.0 } else { 0.0 });
            features.extend(row);
        }
        (features, labels)
    };

    let total = p.n * p.samples_per_client;
    let (pool, pool_labels) = draw(total, &mut streams.named("logistic/pool", 0));
    let (test_x, test_y) = draw(p.test_samples, &mut streams.named("logistic/test", 0));

    let class_ids: Vec<usize> = pool_labels.iter().map(|&y| y as usize).collect();
    // Degenerate pools with a single label are relabelled as one class.
    let class_ids: Vec<usize> = if class_ids.iter().all(|&c| c == class_ids[0]) {
        vec![0; class_ids.len()]
    } else {
        class_ids
    };
    let partition = (0..PARTITION_ATTEMPTS)
        .map(|attempt| dirichlet_partition(&class_ids, p.n, p.alpha, p.seed.wrapping_add(attempt)))
        .find(|r| match r {
            Ok(part) => (0..p.n).all(|c| part.client_size(c) > 0),
            Err(_) => true,
        })
        .ok_or_else(|| Error::invalid("could not draw a partition without empty clients"))??;

    let shards = (0..p.n)
        .map(|c| {
            let idx = partition.client_samples(c);
            let mut data = Vec::with_capacity(idx.len() * p.d);
            for &s in &idx {
                data.extend_from_slice(&pool[s * p.d..(s + 1) * p.d]);
            }
            Ok(LogisticShard {
                features: DenseMatrix::from_row_major(idx.len(), p.d, data)?,
                labels: idx.iter().map(|&s| pool_labels[s]).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let test = LogisticShard {
        features: DenseMatrix::from_row_major(p.test_samples, p.d, test_x)?,
        labels: test_y,
    };

    // Hessian of the mean BCE is bounded by AᵀA / (4 N).
    let mut smoothness: f64 = 0.0;
    for s in &shards {
        let a = &s.features;
        let lambda = power_iteration(p.d, |v| a.matvec_t(&a.matvec(v)?))?;
        smoothness = smoothness.max(lambda / (4.0 * s.len() as f64));
    }

    Ok(LogisticFamily {
        shards,
        test,
        partition,
        dim: p.d,
        smoothness,
    })
}

impl Objective for LogisticFamily {
    fn num_clients(&self) -> usize {
        self.shards.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, client: usize, x: &ParamVector) -> Result<f64> {
        check_client(client, self.shards.len())?;
        check_dim(x, self.dim)?;
        self.shards[client].loss(x.as_slice())
    }

    fn full_grad(&self, client: usize, x: &ParamVector) -> Result<ParamVector> {
        check_client(client, self.shards.len())?;
        check_dim(x, self.dim)?;
        let shard = &self.shards[client];
        ParamVector::new(shard.grad_over(x.as_slice(), 0..shard.len()))
    }

    fn stochastic_grad(&self, client: usize, x: &ParamVector, batch: usize, rng: &mut Stream) -> Result<ParamVector> {
        check_client(client, self.shards.len())?;
        check_dim(x, self.dim)?;
        let shard = &self.shards[client];
        let picks: Vec<usize> = (0..batch).map(|_| rng.random_range(0..shard.len())).collect();
        ParamVector::new(shard.grad_over(x.as_slice(), picks.into_iter()))
    }

    fn steps_per_epoch(&self, client: usize, batch: usize) -> usize {
        self.shards[client].len().div_ceil(batch.max(1))
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.smoothness)
    }

    fn min_value(&self) -> Option<f64> {
        None
    }

    fn test_metric(&self, x: &ParamVector) -> Option<f64> {
        self.test.accuracy(x.as_slice()).ok()
    }
}
