//! Client loss functions, gradient oracles, and the data partitioner.
//!
//! The global objective is the plain average of the client losses,
//! `f(x) = (1/n) Σ_i f_i(x)`, with `f_i` the expectation of a per-sample loss
//! over the client's own distribution.

mod linear;
mod logistic;
mod partition;
mod quadratic;
mod worst_case;

pub use linear::LinearFamily;
pub use logistic::{make_logistic_family, LogisticFamily, LogisticParams, LogisticShard};
pub use partition::{dirichlet_partition, DirichletPartition};
pub use quadratic::{make_quadratic_family, QuadraticFamily, QuadraticShard};
pub use worst_case::{make_worst_case_pair, WorstCasePair};

use crate::error::{Error, Result};
use crate::linalg::{self, ParamVector};
use crate::rng::Stream;

/// A family of `n` client objectives over a shared `d`-dimensional model.
///
/// Implementations are immutable after construction. Stochastic draws take
/// an explicit stream, so concurrent evaluation is deterministic per stream.
pub trait Objective: Send + Sync {
    fn num_clients(&self) -> usize;

    fn dim(&self) -> usize;

    /// Noiseless client loss `f_i(x)`.
    fn value(&self, client: usize, x: &ParamVector) -> Result<f64>;

    /// Exact client gradient `∇f_i(x)`.
    fn full_grad(&self, client: usize, x: &ParamVector) -> Result<ParamVector>;

    /// Unbiased minibatch gradient estimate.
    fn stochastic_grad(&self, client: usize, x: &ParamVector, batch: usize, rng: &mut Stream) -> Result<ParamVector>;

    /// SGD steps that make up one local epoch for `client`.
    fn steps_per_epoch(&self, _client: usize, _batch: usize) -> usize {
        1
    }

    /// Smoothness constant `L` valid for every client, when known.
    fn smoothness(&self) -> Option<f64> {
        None
    }

    /// `min_x f(x)`, when known.
    fn min_value(&self) -> Option<f64> {
        None
    }

    /// Per-draw local variance `E‖g − ∇f_i‖²` at batch size 1, when known in
    /// closed form.
    fn local_variance(&self) -> Option<f64> {
        None
    }

    /// Held-out evaluation metric (e.g. test accuracy), if the family has one.
    fn test_metric(&self, _x: &ParamVector) -> Option<f64> {
        None
    }

    fn global_value(&self, x: &ParamVector) -> Result<f64> {
        let n = self.num_clients();
        let mut acc = 0.0;
        for i in 0..n {
            acc += self.value(i, x)?;
        }
        Ok(acc / n as f64)
    }

    fn global_grad(&self, x: &ParamVector) -> Result<ParamVector> {
        let grads = (0..self.num_clients())
            .map(|i| self.full_grad(i, x))
            .collect::<Result<Vec<_>>>()?;
        linalg::mean(&grads.iter().collect::<Vec<_>>())
    }
}

pub(crate) fn check_client(client: usize, n: usize) -> Result<()> {
    if client >= n {
        return Err(Error::InvalidClient { client, n });
    }
    Ok(())
}

pub(crate) fn check_dim(x: &ParamVector, d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            left: x.len(),
            right: d,
        });
    }
    Ok(())
}

/// Minibatch gradient draw for client `client`.
pub fn stochastic_grad<F: Objective + ?Sized>(
    family: &F,
    client: usize,
    x: &ParamVector,
    batch: usize,
    rng: &mut Stream,
) -> Result<ParamVector> {
    if batch == 0 {
        return Err(Error::invalid("batch must be at least 1"));
    }
    family.stochastic_grad(client, x, batch, rng)
}

/// `(1/n) Σ_i ‖∇f_i(x) − ∇f(x)‖²`.
pub fn estimate_global_variance<F: Objective + ?Sized>(family: &F, x: &ParamVector) -> Result<f64> {
    let n = family.num_clients();
    let global = family.global_grad(x)?;
    let mut acc = 0.0;
    for i in 0..n {
        let diff = linalg::sub(&family.full_grad(i, x)?, &global)?;
        acc += linalg::norm_sq(&diff);
    }
    Ok(acc / n as f64)
}

/// Sample estimate of the per-draw gradient variance of one client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalVarianceEstimate {
    pub value: f64,
    pub draws: usize,
    /// Fewer than two draws: the value is 0 and carries no information.
    pub degenerate: bool,
}

/// Unbiased sample variance `Σ_k ‖g_k − ḡ‖² / (draws − 1)` of batch-1 draws.
pub fn estimate_local_variance<F: Objective + ?Sized>(
    family: &F,
    client: usize,
    x: &ParamVector,
    draws: usize,
    rng: &mut Stream,
) -> Result<LocalVarianceEstimate> {
    if draws == 0 {
        return Err(Error::invalid("draws must be at least 1"));
    }
    let samples = (0..draws)
        .map(|_| family.stochastic_grad(client, x, 1, rng))
        .collect::<Result<Vec<_>>>()?;
    if draws == 1 {
        return Ok(LocalVarianceEstimate {
            value: 0.0,
            draws,
            degenerate: true,
        });
    }
    let mean = linalg::mean(&samples.iter().collect::<Vec<_>>())?;
    let mut acc = 0.0;
    for s in &samples {
        acc += linalg::norm_sq(&linalg::sub(s, &mean)?);
    }
    Ok(LocalVarianceEstimate {
        value: acc / (draws - 1) as f64,
        draws,
        degenerate: false,
    })
}

/// Central finite differences of the noiseless client loss.
pub fn finite_diff_grad<F: Objective + ?Sized>(
    family: &F,
    client: usize,
    x: &ParamVector,
    h: f64,
) -> Result<ParamVector> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.as_slice().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for j in 0..probe.len() {
        let orig = probe[j];
        probe[j] = orig + h;
        let plus = family.value(client, &ParamVector::new(probe.clone())?)?;
        probe[j] = orig - h;
        let minus = family.value(client, &ParamVector::new(probe.clone())?)?;
        probe[j] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    ParamVector::new(grad)
}

/// Assumption constants fed to the theory checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssumptionConstants {
    /// Smoothness `L`.
    pub l: f64,
    /// Stochastic gradient bound `G`.
    pub g: f64,
    pub sigma_l_sq: f64,
    pub sigma_g_sq: f64,
}

impl AssumptionConstants {
    pub fn new(l: f64, g: f64, sigma_l_sq: f64, sigma_g_sq: f64) -> Result<Self> {
        for (name, v) in [("L", l), ("G", g), ("sigma_l^2", sigma_l_sq), ("sigma_g^2", sigma_g_sq)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(Self {
            l,
            g,
            sigma_l_sq,
            sigma_g_sq,
        })
    }

    /// Measures the constants of `family` at the given probe points.
    ///
    /// `L` and `σ_l²` come from the family's closed forms when available;
    /// otherwise `σ_l²` is the largest sample variance over clients and points
    /// (with `draws` draws each). `σ_g²` is the largest global variance over
    /// the points. `G` is supplied by the caller (the observed maximum
    /// stochastic gradient norm of a calibration run).
    pub fn measure<F: Objective + ?Sized>(
        family: &F,
        points: &[ParamVector],
        observed_g: f64,
        draws: usize,
        rng: &mut Stream,
    ) -> Result<Self> {
        let l = family
            .smoothness()
            .ok_or_else(|| Error::invalid("objective has no known smoothness constant"))?;
        let mut sigma_g_sq: f64 = 0.0;
        for x in points {
            sigma_g_sq = sigma_g_sq.max(estimate_global_variance(family, x)?);
        }
        let sigma_l_sq = match family.local_variance() {
            Some(v) => v,
            None => {
                let mut worst: f64 = 0.0;
                for x in points {
                    for i in 0..family.num_clients() {
                        worst = worst.max(estimate_local_variance(family, i, x, draws, rng)?.value);
                    }
                }
                worst
            }
        };
        Self::new(l, observed_g, sigma_l_sq, sigma_g_sq)
    }
}

/// Largest eigenvalue of a symmetric positive semidefinite operator by power
/// iteration.
pub(crate) fn power_iteration(dim: usize, apply: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<f64> {
    if dim == 0 {
        return Ok(0.0);
    }
    // Deterministic, non-axis-aligned start vector.
    let mut v: Vec<f64> = (0..dim).map(|j| 1.0 + 0.01 * ((j * 7919) % 101) as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let norm = linalg::dot_slices(&v, &v).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|a| *a /= norm);
        let w = apply(&v)?;
        let next = linalg::dot_slices(&v, &w);
        let converged = (next - lambda).abs() <= 1e-14 * next.abs();
        lambda = next;
        v = w;
        if converged {
            break;
        }
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    #[test]
    fn local_variance_single_draw_is_flagged() {
        let fam = make_quadratic_family(3, 4, 0.5, 0.2, 1).unwrap();
        let mut rng = Streams::new(0).named("t", 0);
        let est = estimate_local_variance(&fam, 0, &ParamVector::zeros(4), 1, &mut rng).unwrap();
        assert_eq!(est.value, 0.0);
        assert!(est.degenerate);
    }

    #[test]
    fn local_variance_matches_closed_form() {
        let (d, noise) = (4, 0.2);
        let fam = make_quadratic_family(3, d, 0.5, noise, 1).unwrap();
        let mut rng = Streams::new(0).named("t", 0);
        let est = estimate_local_variance(&fam, 1, &ParamVector::zeros(d), 20_000, &mut rng).unwrap();
        let truth = d as f64 * noise * noise;
        assert_eq!(fam.local_variance(), Some(truth));
        assert!((est.value - truth).abs() < 0.05 * truth, "{} vs {truth}", est.value);
    }

    #[test]
    fn rejects_bad_arguments() {
        let fam = make_worst_case_pair(1.0).unwrap();
        let x = ParamVector::zeros(1);
        let mut rng = Streams::new(0).named("t", 0);
        assert!(matches!(
            stochastic_grad(&fam, 0, &x, 0, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            stochastic_grad(&fam, 2, &x, 1, &mut rng),
            Err(Error::InvalidClient { client: 2, n: 2 })
        ));
        assert!(finite_diff_grad(&fam, 0, &x, 0.0).is_err());
        assert!(AssumptionConstants::new(1.0, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn power_iteration_on_diagonal() {
        let diag = [1.0, 5.0, 2.0];
        let lambda = power_iteration(3, |v| Ok(v.iter().zip(diag).map(|(a, b)| a * b).collect())).unwrap();
        assert!((lambda - 5.0).abs() < 1e-10);
    }

    #[test]
    fn measured_constants_for_worst_case_pair() {
        let fam = make_worst_case_pair(1.5).unwrap();
        let mut rng = Streams::new(0).named("t", 0);
        let pts = [ParamVector::zeros(1), ParamVector::new(vec![3.0]).unwrap()];
        let c = AssumptionConstants::measure(&fam, &pts, 7.0, 10, &mut rng).unwrap();
        assert_eq!(c.l, 2.0);
        assert_eq!(c.g, 7.0);
        assert_eq!(c.sigma_l_sq, 0.0);
        assert!((c.sigma_g_sq - 4.0 * 1.5 * 1.5).abs() < 1e-12);
    }
}
