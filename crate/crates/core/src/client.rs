//! Client-side local computation.
//!
//! A client reads a (possibly stale) global model, runs `K` plain SGD steps on
//! its own loss, and sends back the model difference divided by `K`. The
//! division keeps clients that ran more steps from dominating the aggregate.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, ParamVector};
use crate::objectives::Objective;
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalConfig {
    /// Local learning rate `η_l`.
    pub eta_l: f64,
    /// Default local epoch count `K`.
    pub k_base: usize,
    /// Randomness degree `R`: epochs are drawn from `{1, …, K·R}`.
    pub r: usize,
    /// Samples per stochastic gradient.
    pub batch: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            eta_l: 0.01,
            k_base: 3,
            r: 2,
            batch: 1,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_l > 0.0) || !self.eta_l.is_finite() {
            return Err(Error::invalid(format!("eta_l must be positive, got {}", self.eta_l)));
        }
        if self.k_base == 0 || self.r == 0 || self.batch == 0 {
            return Err(Error::invalid("k, r and batch must be at least 1"));
        }
        Ok(())
    }

    /// Largest epoch count a client may draw, `K·R`.
    pub fn max_epochs(&self) -> usize {
        self.k_base * self.r
    }
}

/// Decides how many local epochs client `client` runs in round `round`.
pub trait StepPolicy: Send + Sync {
    fn local_epochs(&self, client: usize, round: usize, cfg: &LocalConfig, rng: &mut Stream) -> usize;
}

/// Uniform over `{1, …, K·R}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformSteps;

impl StepPolicy for UniformSteps {
    fn local_epochs(&self, _client: usize, _round: usize, cfg: &LocalConfig, rng: &mut Stream) -> usize {
        sample_local_steps(cfg, rng)
    }
}

/// Always exactly `K`; the homogeneous server-centric setting.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedSteps;

impl StepPolicy for FixedSteps {
    fn local_epochs(&self, _client: usize, _round: usize, cfg: &LocalConfig, _rng: &mut Stream) -> usize {
        cfg.k_base
    }
}

pub fn sample_local_steps(cfg: &LocalConfig, rng: &mut Stream) -> usize {
    rng.random_range(1..=cfg.max_epochs())
}

/// A normalized model difference sent to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// `(x_base − x_final) / steps_used`.
    pub delta: ParamVector,
    pub client_id: usize,
    /// Round of the global model the client started from.
    pub base_version: usize,
    pub steps_used: usize,
    /// Largest stochastic gradient norm seen during the local steps.
    pub max_grad_norm: f64,
}

/// Runs `steps` SGD steps from `x_base`; returns the final iterate and the
/// largest gradient norm encountered.
pub fn local_sgd<F: Objective + ?Sized>(
    family: &F,
    client: usize,
    x_base: &ParamVector,
    steps: usize,
    eta_l: f64,
    batch: usize,
    rng: &mut Stream,
) -> Result<(ParamVector, f64)> {
    let mut x = x_base.clone();
    let mut max_norm: f64 = 0.0;
    for step in 0..steps {
        let g = family.stochastic_grad(client, &x, batch, rng).map_err(|e| match e {
            Error::NonFinite { .. } => Error::DivergedLocal { step },
            other => other,
        })?;
        max_norm = max_norm.max(linalg::l2_norm(&g));
        x = linalg::axpy(-eta_l, &g, &x).map_err(|e| match e {
            Error::NonFinite { .. } => Error::DivergedLocal { step },
            other => other,
        })?;
    }
    Ok((x, max_norm))
}

/// One client's local computation.
#[allow(clippy::too_many_arguments)]
pub fn cc_local<F: Objective + ?Sized>(
    family: &F,
    client_id: usize,
    x_base: &ParamVector,
    base_version: usize,
    steps: usize,
    eta_l: f64,
    batch: usize,
    rng: &mut Stream,
) -> Result<LocalUpdate> {
    if steps == 0 {
        return Err(Error::invalid("local step count must be at least 1"));
    }
    if !(eta_l >= 0.0) || !eta_l.is_finite() {
        return Err(Error::invalid(format!(
            "eta_l must be finite and nonnegative, got {eta_l}"
        )));
    }
    if client_id >= family.num_clients() {
        return Err(Error::InvalidClient {
            client: client_id,
            n: family.num_clients(),
        });
    }
    let (x_final, max_grad_norm) = local_sgd(family, client_id, x_base, steps, eta_l, batch, rng)?;
    let delta = linalg::div_scalar(&linalg::sub(x_base, &x_final)?, steps as f64)?;
    Ok(LocalUpdate {
        delta,
        client_id,
        base_version,
        steps_used: steps,
        max_grad_norm,
    })
}
