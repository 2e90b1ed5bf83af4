use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::{check_client, check_dim, power_iteration, Objective};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, ParamVector};
use crate::rng::{Stream, Streams};

/// `f_i(x) = ½‖A_i x − b_i‖²` with additive isotropic Gaussian gradient noise.
#[derive(Debug, Clone)]
pub struct QuadraticShard {
    /// `A_i`; shards may share one factor.
    pub factor: Arc<DenseMatrix>,
    /// `b_i`.
    pub target: ParamVector,
    /// Per-coordinate std of one gradient draw.
    pub noise_std: f64,
}

impl QuadraticShard {
    fn residual(&self, x: &ParamVector) -> Result<Vec<f64>> {
        let ax = self.factor.matvec(x.as_slice())?;
        Ok(ax.iter().zip(self.target.iter()).map(|(a, b)| a - b).collect())
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticFamily {
    shards: Vec<QuadraticShard>,
    dim: usize,
    smoothness: f64,
    optimum: ParamVector,
    min_value: f64,
}

impl QuadraticFamily {
    pub fn from_shards(shards: Vec<QuadraticShard>) -> Result<Self> {
        let first = shards
            .first()
            .ok_or_else(|| Error::invalid("quadratic family needs at least one shard"))?;
        let dim = first.factor.cols();
        for s in &shards {
            if s.factor.cols() != dim || s.factor.rows() != s.target.len() {
                return Err(Error::DimensionMismatch {
                    left: s.factor.cols(),
                    right: dim,
                });
            }
            if !(s.noise_std >= 0.0) || !s.noise_std.is_finite() {
                return Err(Error::invalid("noise_std must be finite and nonnegative"));
            }
        }

        let mut smoothness: f64 = 0.0;
        let mut seen: Vec<*const DenseMatrix> = Vec::new();
        for s in &shards {
            let ptr = Arc::as_ptr(&s.factor);
            if seen.contains(&ptr) {
                continue;
            }
            seen.push(ptr);
            let a = &s.factor;
            let lambda = power_iteration(dim, |v| a.matvec_t(&a.matvec(v)?))?;
            smoothness = smoothness.max(lambda);
        }

        // Global optimum: (Σ AᵢᵀAᵢ) x = Σ Aᵢᵀbᵢ.
        let mut gram = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for s in &shards {
            let a = DMatrix::from_row_slice(s.factor.rows(), dim, &row_major(&s.factor));
            gram += a.transpose() * &a;
            rhs += a.transpose() * DVector::from_column_slice(s.target.as_slice());
        }
        let solution = gram
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| gram.lu().solve(&rhs))
            .ok_or_else(|| Error::invalid("quadratic family has a singular Hessian"))?;
        let optimum = ParamVector::new(solution.iter().copied().collect())?;

        let mut family = Self {
            shards,
            dim,
            smoothness,
            optimum,
            min_value: 0.0,
        };
        family.min_value = family.global_value(&family.optimum)?;
        Ok(family)
    }

    pub fn shards(&self) -> &[QuadraticShard] {
        &self.shards
    }

    /// Minimizer of the global objective.
    pub fn optimum(&self) -> &ParamVector {
        &self.optimum
    }

    /// Minimizer of client `client`'s loss (least-squares solution).
    pub fn local_optimum(&self, client: usize) -> Result<ParamVector> {
        check_client(client, self.shards.len())?;
        let s = &self.shards[client];
        let a = DMatrix::from_row_slice(s.factor.rows(), self.dim, &row_major(&s.factor));
        let b = DVector::from_column_slice(s.target.as_slice());
        let sol = a
            .svd(true, true)
            .solve(&b, 1e-14)
            .map_err(|e| Error::invalid(format!("least squares failed: {e}")))?;
        ParamVector::new(sol.iter().copied().collect())
    }
}

fn row_major(m: &DenseMatrix) -> Vec<f64> {
    (0..m.rows()).flat_map(|r| m.row(r).to_vec()).collect()
}

impl Objective for QuadraticFamily {
    fn num_clients(&self) -> usize {
        self.shards.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, client: usize, x: &ParamVector) -> Result<f64> {
        check_client(client, self.shards.len())?;
        check_dim(x, self.dim)?;
        let r = self.shards[client].residual(x)?;
        Ok(0.5 * r.iter().map(|v| v * v).sum::<f64>())
    }

    fn full_grad(&self, client: usize, x: &ParamVector) -> Result<ParamVector> {
        check_client(client, self.shards.len())?;
        check_dim(x, self.dim)?;
        let s = &self.shards[client];
        ParamVector::new(s.factor.matvec_t(&s.residual(x)?)?)
    }

    fn stochastic_grad(&self, client: usize, x: &ParamVector, batch: usize, rng: &mut Stream) -> Result<ParamVector> {
        let grad = self.full_grad(client, x)?;
        let std = self.shards[client].noise_std / (batch as f64).sqrt();
        if std == 0.0 {
            return Ok(grad);
        }
        ParamVector::new(
            grad.iter()
                .map(|g| {
                    let z: f64 = StandardNormal.sample(rng);
                    g + std * z
                })
                .collect(),
        )
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.smoothness)
    }

    fn min_value(&self) -> Option<f64> {
        Some(self.min_value)
    }

    fn local_variance(&self) -> Option<f64> {
        let worst = self.shards.iter().map(|s| s.noise_std).fold(0.0, f64::max);
        Some(self.dim as f64 * worst * worst)
    }
}

/// Synthetic quadratic clients sharing a well-conditioned factor `A`.
///
/// Client targets are `b_i = b_0 + hetero · z_i` with `b_0, z_i` standard
/// normal, so the global variance `(1/n) Σ ‖Aᵀ(z_i − z̄)‖² · hetero²` is
/// independent of `x`, zero at `hetero = 0` and increasing in `hetero`.
pub fn make_quadratic_family(n: usize, d: usize, hetero: f64, noise_std: f64, seed: u64) -> Result<QuadraticFamily> {
    if n == 0 || d == 0 {
        return Err(Error::invalid(format!(
            "quadratic family needs n, d >= 1 (got n={n}, d={d})"
        )));
    }
    if !(hetero >= 0.0) || !hetero.is_finite() {
        return Err(Error::invalid(format!(
            "hetero must be finite and nonnegative, got {hetero}"
        )));
    }
    let streams = Streams::new(seed);
    let mut rng = streams.named("quadratic/factor", 0);
    let spread = 0.3 / (d as f64).sqrt();
    let mut data = Vec::with_capacity(d * d);
    for r in 0..d {
        for c in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(if r == c { 1.0 } else { 0.0 } + spread * z);
        }
    }
    let factor = Arc::new(DenseMatrix::from_row_major(d, d, data)?);

    let mut rng = streams.named("quadratic/targets", 0);
    let base: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let shards = (0..n)
        .map(|_| {
            let target = base
                .iter()
                .map(|b| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    b + hetero * z
                })
                .collect();
            Ok(QuadraticShard {
                factor: Arc::clone(&factor),
                target: ParamVector::new(target)?,
                noise_std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QuadraticFamily::from_shards(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::objectives::{estimate_global_variance, finite_diff_grad};

    fn scalar_family(a: f64, b: f64) -> QuadraticFamily {
        QuadraticFamily::from_shards(vec![QuadraticShard {
            factor: Arc::new(DenseMatrix::from_row_major(1, 1, vec![a]).unwrap()),
            target: ParamVector::new(vec![b]).unwrap(),
            noise_std: 0.0,
        }])
        .unwrap()
    }

    #[test]
    fn scalar_finite_difference() {
        let fam = scalar_family(1.0, 0.0);
        let g = finite_diff_grad(&fam, 0, &ParamVector::new(vec![2.0]).unwrap(), 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6);
        let g0 = finite_diff_grad(&fam, 0, &ParamVector::zeros(1), 1e-5).unwrap();
        assert!(g0[0].abs() < 1e-6);
    }

    #[test]
    fn zero_hetero_gives_identical_clients() {
        let fam = make_quadratic_family(5, 3, 0.0, 0.1, 9).unwrap();
        for x in [vec![0.0; 3], vec![1.0, -2.0, 0.5]] {
            let v = estimate_global_variance(&fam, &ParamVector::new(x).unwrap()).unwrap();
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn single_client_global_equals_local() {
        let fam = make_quadratic_family(1, 4, 0.7, 0.0, 3).unwrap();
        let x = ParamVector::new(vec![0.3, -0.1, 2.0, 1.0]).unwrap();
        assert_eq!(fam.global_value(&x).unwrap(), fam.value(0, &x).unwrap());
        assert_eq!(fam.global_grad(&x).unwrap(), fam.full_grad(0, &x).unwrap());
    }

    #[test]
    fn global_variance_grows_with_hetero() {
        let x = ParamVector::zeros(6);
        let v: Vec<f64> = [0.0, 0.1, 0.5, 1.0]
            .iter()
            .map(|&h| estimate_global_variance(&make_quadratic_family(8, 6, h, 0.1, 42).unwrap(), &x).unwrap())
            .collect();
        assert!(v.windows(2).all(|w| w[0] <= w[1]), "{v:?}");
        assert!(v[3] > v[1]);
    }

    #[test]
    fn noiseless_gradient_vanishes_at_local_optimum() {
        let fam = make_quadratic_family(4, 5, 1.0, 0.0, 11).unwrap();
        for i in 0..4 {
            let opt = fam.local_optimum(i).unwrap();
            let g = fam.full_grad(i, &opt).unwrap();
            assert!(linalg::l2_norm(&g) < 1e-10);
        }
        let g = fam.global_grad(fam.optimum()).unwrap();
        assert!(linalg::l2_norm(&g) < 1e-10);
    }

    #[test]
    fn smoothness_matches_symmetric_eigendecomposition() {
        let fam = make_quadratic_family(2, 7, 0.5, 0.0, 5).unwrap();
        let a = &fam.shards()[0].factor;
        let m = DMatrix::from_row_slice(7, 7, &row_major(a));
        let eig = (m.transpose() * &m).symmetric_eigen();
        let top = eig.eigenvalues.iter().copied().fold(f64::MIN, f64::max);
        let l = fam.smoothness().unwrap();
        assert!((l - top).abs() < 1e-9 * top, "{l} vs {top}");
    }

    #[test]
    fn invalid_sizes() {
        assert!(make_quadratic_family(0, 3, 0.1, 0.1, 0).is_err());
        assert!(make_quadratic_family(3, 0, 0.1, 0.1, 0).is_err());
        assert!(make_quadratic_family(3, 3, -0.1, 0.1, 0).is_err());
    }
}
