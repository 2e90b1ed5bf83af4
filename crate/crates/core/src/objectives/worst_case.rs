use super::{check_client, check_dim, Objective};
use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::rng::Stream;

/// Two scalar clients `f_0(x) = (x + G)²`, `f_1(x) = (x − G)²` with exact
/// gradients. Their global variance is `4G²` everywhere; if client 0 never
/// participates, training settles at `x = G` where `‖∇f‖² = 4G²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCasePair {
    g: f64,
}

pub fn make_worst_case_pair(g: f64) -> Result<WorstCasePair> {
    if !(g > 0.0) || !g.is_finite() {
        return Err(Error::invalid(format!("worst-case pair needs G > 0, got {g}")));
    }
    Ok(WorstCasePair { g })
}

impl WorstCasePair {
    pub fn bound(&self) -> f64 {
        self.g
    }

    fn center(&self, client: usize) -> f64 {
        if client == 0 {
            -self.g
        } else {
            self.g
        }
    }
}

impl Objective for WorstCasePair {
    fn num_clients(&self) -> usize {
        2
    }

    fn dim(&self) -> usize {
        1
    }

    fn value(&self, client: usize, x: &ParamVector) -> Result<f64> {
        check_client(client, 2)?;
        check_dim(x, 1)?;
        let r = x[0] - self.center(client);
        Ok(r * r)
    }

    fn full_grad(&self, client: usize, x: &ParamVector) -> Result<ParamVector> {
        check_client(client, 2)?;
        check_dim(x, 1)?;
        ParamVector::new(vec![2.0 * (x[0] - self.center(client))])
    }

    fn stochastic_grad(&self, client: usize, x: &ParamVector, _batch: usize, _rng: &mut Stream) -> Result<ParamVector> {
        self.full_grad(client, x)
    }

    fn smoothness(&self) -> Option<f64> {
        Some(2.0)
    }

    fn min_value(&self) -> Option<f64> {
        // ½((x+G)² + (x−G)²) = x² + G², minimized at 0.
        Some(self.g * self.g)
    }

    fn local_variance(&self) -> Option<f64> {
        Some(0.0)
    }
}
