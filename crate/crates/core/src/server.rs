//! Server-side aggregation and global optimizer steps.
//!
//! The server averages the buffered normalized client deltas into a
//! pseudo-gradient `Δ_t` and applies one of five rules:
//!
//! | kind     | second moment                           | step                              |
//! |----------|-----------------------------------------|-----------------------------------|
//! | Sgd      | –                                       | `x ← x − η Δ`                     |
//! | Momentum | –                                       | `x ← x − η m`                     |
//! | Adagrad  | `v̂ ← v̂ + Δ²`                            | `x ← x − η m / (√v̂ + ε)`          |
//! | Adam     | `v̂ ← (1−γ) Δ² + γ v̂`                    | same                              |
//! | Ams      | `v ← (1−γ) Δ² + γ v`, `v̂ ← max(v̂, v)`   | same                              |
//!
//! with `m ← (1−β) Δ + β m` for every kind but Sgd. There is no bias
//! correction, and `ε` sits outside the square root.

use std::fmt;
use std::str::FromStr;

use crate::client::LocalUpdate;
use crate::error::{Error, Result};
use crate::linalg::{self, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adagrad,
    Adam,
    Ams,
}

impl OptimizerKind {
    pub fn is_adaptive(self) -> bool {
        matches!(self, Self::Adagrad | Self::Adam | Self::Ams)
    }
}

/// Optimizer names accepted in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerName {
    /// Sgd with `η = 1`: plain model averaging.
    FedAvg,
    /// Sgd with a tunable `η`.
    FedSgd,
    FedAvgM,
    FedAdagrad,
    FedAdam,
    FedAms,
}

impl OptimizerName {
    pub const ALL: [OptimizerName; 6] = [
        Self::FedAvg,
        Self::FedSgd,
        Self::FedAvgM,
        Self::FedAdagrad,
        Self::FedAdam,
        Self::FedAms,
    ];

    pub fn kind(self) -> OptimizerKind {
        match self {
            Self::FedAvg | Self::FedSgd => OptimizerKind::Sgd,
            Self::FedAvgM => OptimizerKind::Momentum,
            Self::FedAdagrad => OptimizerKind::Adagrad,
            Self::FedAdam => OptimizerKind::Adam,
            Self::FedAms => OptimizerKind::Ams,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::FedSgd => "fedsgd",
            Self::FedAvgM => "fedavgm",
            Self::FedAdagrad => "fedadagrad",
            Self::FedAdam => "fedadam",
            Self::FedAms => "fedams",
        }
    }
}

impl fmt::Display for OptimizerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown optimizer {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerHyper {
    /// Global learning rate `η`.
    pub eta: f64,
    /// Momentum factor `β ∈ [0, 1)`.
    pub beta: f64,
    /// Second-moment factor `γ ∈ [0, 1)`.
    pub gamma: f64,
    /// Adaptivity floor `ε > 0`.
    pub eps: f64,
    pub kind: OptimizerKind,
}

impl ServerHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid(format!(
                "eta must be finite and nonnegative, got {}",
                self.eta
            )));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::invalid(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Global model and optimizer buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// Global model `x_t`.
    pub x: ParamVector,
    /// Momentum buffer `m_t`.
    pub mom: ParamVector,
    /// Raw second moment `v_t`; tracked only for Ams.
    pub v: Option<ParamVector>,
    /// Second moment used in the denominator, `v̂_t`.
    pub v_hat: ParamVector,
    pub round: usize,
}

/// `m_0 = 0`, `v_0 = v̂_0 = ε²·1`, round 0.
pub fn init_state(x0: ParamVector, hyper: &ServerHyper) -> Result<ServerState> {
    hyper.validate()?;
    let d = x0.len();
    let floor = ParamVector::filled(d, hyper.eps * hyper.eps)?;
    Ok(ServerState {
        mom: ParamVector::zeros(d),
        v: (hyper.kind == OptimizerKind::Ams).then(|| floor.clone()),
        v_hat: floor,
        x: x0,
        round: 0,
    })
}

/// Averages the buffered deltas in canonical (client, base version) order,
/// so the result does not depend on the order updates arrived in.
pub fn aggregate(updates: &[LocalUpdate]) -> Result<ParamVector> {
    aggregate_over(updates, updates.len())
}

/// `(1/divisor) Σ Δ_i`, summed in canonical order. Used directly when the
/// buffer size is random (Bernoulli participation) but the normalizer is `m`.
pub fn aggregate_over(updates: &[LocalUpdate], divisor: usize) -> Result<ParamVector> {
    if updates.is_empty() || divisor == 0 {
        return Err(Error::EmptyBuffer);
    }
    let mut order: Vec<&LocalUpdate> = updates.iter().collect();
    order.sort_by_key(|u| (u.client_id, u.base_version));
    let d = order[0].delta.len();
    // Incremental mean: exact when all deltas are equal.
    let mut acc = vec![0.0; d];
    for (k, u) in order.into_iter().enumerate() {
        if u.delta.len() != d {
            return Err(Error::DimensionMismatch {
                left: u.delta.len(),
                right: d,
            });
        }
        for (a, b) in acc.iter_mut().zip(u.delta.iter()) {
            *a += (b - *a) / (k + 1) as f64;
        }
    }
    if divisor != updates.len() {
        let scale = updates.len() as f64 / divisor as f64;
        acc.iter_mut().for_each(|a| *a *= scale);
    }
    ParamVector::new(acc)
}

impl ServerState {
    /// Applies one global step with pseudo-gradient `delta`. The state is left
    /// untouched on error.
    pub fn step(&mut self, delta: &ParamVector, hyper: &ServerHyper) -> Result<()> {
        if delta.len() != self.x.len() {
            return Err(Error::DimensionMismatch {
                left: delta.len(),
                right: self.x.len(),
            });
        }
        if let Some(index) = delta.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let (b, g) = (hyper.beta, hyper.gamma);

        if hyper.kind == OptimizerKind::Sgd {
            self.x = linalg::axpy(-hyper.eta, delta, &self.x)?;
            self.round += 1;
            return Ok(());
        }

        let mom = zip2(delta, &self.mom, |d, m| (1.0 - b) * d + b * m)?;
        let mut v = self.v.clone();
        let v_hat = match hyper.kind {
            OptimizerKind::Momentum => self.v_hat.clone(),
            OptimizerKind::Adagrad => zip2(&self.v_hat, delta, |vh, d| vh + d * d)?,
            OptimizerKind::Adam => zip2(delta, &self.v_hat, |d, vh| (1.0 - g) * d * d + g * vh)?,
            OptimizerKind::Ams => {
                let prev = self
                    .v
                    .as_ref()
                    .ok_or_else(|| Error::invalid("Ams state is missing its v buffer"))?;
                let next = zip2(delta, prev, |d, v| (1.0 - g) * d * d + g * v)?;
                let vh = linalg::ew_max(&self.v_hat, &next)?;
                v = Some(next);
                vh
            }
            OptimizerKind::Sgd => unreachable!(),
        };
        let x = if hyper.kind == OptimizerKind::Momentum {
            linalg::axpy(-hyper.eta, &mom, &self.x)?
        } else {
            let den = linalg::ew_sqrt(&v_hat)?;
            let step: Vec<f64> = mom.iter().zip(den.iter()).map(|(m, s)| m / (s + hyper.eps)).collect();
            linalg::axpy(-hyper.eta, &ParamVector::new(step)?, &self.x)?
        };

        self.x = x;
        self.mom = mom;
        self.v = v;
        self.v_hat = v_hat;
        self.round += 1;
        Ok(())
    }
}

/// Functional form of [`ServerState::step`].
pub fn server_step(state: &ServerState, delta: &ParamVector, hyper: &ServerHyper) -> Result<ServerState> {
    let mut next = state.clone();
    next.step(delta, hyper)?;
    Ok(next)
}

fn zip2(a: &ParamVector, b: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
    ParamVector::new(a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect())
}
