use super::{check_client, check_dim, Objective};
use crate::error::{Error, Result};
use crate::linalg::{self, ParamVector};
use crate::rng::Stream;

/// `f_i(x) = g_iᵀx`: constant, noiseless gradients. Unbounded below, so only
/// useful for exercising the local update rule.
#[derive(Debug, Clone)]
pub struct LinearFamily {
    slopes: Vec<ParamVector>,
}

impl LinearFamily {
    pub fn new(slopes: Vec<ParamVector>) -> Result<Self> {
        let d = slopes
            .first()
            .ok_or_else(|| Error::invalid("linear family needs at least one client"))?
            .len();
        if let Some(bad) = slopes.iter().find(|s| s.len() != d) {
            return Err(Error::DimensionMismatch {
                left: bad.len(),
                right: d,
            });
        }
        Ok(Self { slopes })
    }
}

impl Objective for LinearFamily {
    fn num_clients(&self) -> usize {
        self.slopes.len()
    }

    fn dim(&self) -> usize {
        self.slopes[0].len()
    }

    fn value(&self, client: usize, x: &ParamVector) -> Result<f64> {
        check_client(client, self.slopes.len())?;
        linalg::dot(&self.slopes[client], x)
    }

    fn full_grad(&self, client: usize, x: &ParamVector) -> Result<ParamVector> {
        check_client(client, self.slopes.len())?;
        check_dim(x, self.dim())?;
        Ok(self.slopes[client].clone())
    }

    fn stochastic_grad(&self, client: usize, x: &ParamVector, _batch: usize, _rng: &mut Stream) -> Result<ParamVector> {
        self.full_grad(client, x)
    }

    fn smoothness(&self) -> Option<f64> {
        Some(0.0)
    }

    fn local_variance(&self) -> Option<f64> {
        Some(0.0)
    }
}
