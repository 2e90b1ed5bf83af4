//! Step-size conditions, bound constants and the rate envelope of the
//! convergence analysis, evaluated for concrete settings.
//!
//! These are diagnostics: nothing here stops a run.

use crate::error::{Error, Result};
use crate::objectives::AssumptionConstants;

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

/// `C_β = β / (1 − β)`.
pub fn c_beta(beta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0, 1), got {beta}")));
    }
    Ok(beta / (1.0 - beta))
}

/// `min{1/(8KL), √(1/(120 L² ε τ K²)), ε/(√T G)}`.
///
/// With `tau = 0` the middle branch places no constraint and is skipped.
pub fn lr_upper_bound(l: f64, k_max: usize, tau: usize, eps: f64, g: f64, t: usize) -> Result<f64> {
    positive("L", l)?;
    positive("eps", eps)?;
    positive("G", g)?;
    if k_max == 0 || t == 0 {
        return Err(Error::invalid("K_max and T must be at least 1"));
    }
    let k = k_max as f64;
    let first = 1.0 / (8.0 * k * l);
    let second = if tau == 0 {
        f64::INFINITY
    } else {
        (1.0 / (120.0 * l * l * eps * tau as f64 * k * k)).sqrt()
    };
    let third = eps / ((t as f64).sqrt() * g);
    Ok(first.min(second).min(third))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HCondition {
    pub holds: bool,
    /// `ε² − (H₁ η_l² + H₂ η_l)`.
    pub slack: f64,
    pub h1: f64,
    pub h2: f64,
}

/// Tests `H₁ η_l² + H₂ η_l ≤ ε²` with `H₁ = 2η²L²τ²` and
/// `H₂ = 4ηLC_β² + 6ηLε + 2Gε`.
pub fn check_h_condition(eta: f64, eta_l: f64, l: f64, tau: usize, beta: f64, eps: f64, g: f64) -> Result<HCondition> {
    positive("eta", eta)?;
    positive("eps", eps)?;
    for (name, v) in [("eta_l", eta_l), ("L", l), ("G", g)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!(
                "{name} must be finite and nonnegative, got {v}"
            )));
        }
    }
    let c = c_beta(beta)?;
    let tau = tau as f64;
    let h1 = 2.0 * eta * eta * l * l * tau * tau;
    let h2 = 4.0 * eta * l * c * c + 6.0 * eta * l * eps + 2.0 * g * eps;
    let slack = eps * eps - (h1 * eta_l * eta_l + h2 * eta_l);
    Ok(HCondition {
        holds: slack >= 0.0,
        slack,
        h1,
        h2,
    })
}

/// Everything the bound needs besides the assumption constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub d: usize,
    pub eta: f64,
    pub eta_l: f64,
    pub beta: f64,
    pub eps: f64,
    pub m: usize,
    pub tau: usize,
    pub rounds: usize,
    /// Round average of the mean local step count.
    pub phi1: f64,
    /// Round average of the mean squared local step count.
    pub phi2: f64,
    /// Round average of `(1/m) Σ 1/K`.
    pub phi3: f64,
    /// `f(x_0) − f*`, or an upper bound on it.
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    pub c_beta: f64,
    pub h1: f64,
    pub h2: f64,
    pub phi: f64,
    pub phi_g: f64,
    pub phi_l: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub phi3: f64,
    /// Value of the bound on `(1/T) Σ E‖∇f(x_t)‖²`.
    pub rhs: f64,
}

pub fn bound_terms(inputs: &BoundInputs, k: &AssumptionConstants) -> Result<BoundTerms> {
    let p = inputs;
    positive("eta", p.eta)?;
    positive("eta_l", p.eta_l)?;
    positive("eps", p.eps)?;
    if p.m == 0 || p.rounds == 0 || p.d == 0 {
        return Err(Error::invalid("d, m and T must be at least 1"));
    }
    for (name, v) in [("phi1", p.phi1), ("phi2", p.phi2), ("phi3", p.phi3), ("gap", p.gap)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!(
                "{name} must be finite and nonnegative, got {v}"
            )));
        }
    }
    let c = c_beta(p.beta)?;
    let h = check_h_condition(p.eta, p.eta_l, k.l, p.tau, p.beta, p.eps, k.g)?;
    let (eta, eta_l, eps, l, g) = (p.eta, p.eta_l, p.eps, k.l, k.g);
    let (d, m, tau, t) = (p.d as f64, p.m as f64, p.tau as f64, p.rounds as f64);

    let phi = 4.0 * d * g * g * c + l * eta * eta_l * g * g * c * c * (4.0 * d / eps);
    let phi_g = 240.0 * eta_l * eta_l * l * l * p.phi2;
    let phi_l = 40.0 * eta_l * eta_l * l * l * p.phi1
        + (4.0 * eta * eta_l * l * c * c + 6.0 * l * eta * eta_l + 2.0 * eta_l * g) / (m * eps) * p.phi3
        + 2.0 * eta * eta * eta_l * eta_l * l * l * tau * tau / (eps * eps * m) * p.phi3;
    let rhs = 8.0 * eps / (eta * eta_l * t) * p.gap + phi / t + phi_g * k.sigma_g_sq + phi_l * k.sigma_l_sq;

    Ok(BoundTerms {
        c_beta: c,
        h1: h.h1,
        h2: h.h2,
        phi,
        phi_g,
        phi_l,
        phi1: p.phi1,
        phi2: p.phi2,
        phi3: p.phi3,
        rhs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEnvelope {
    /// `√(1/(mKT))`.
    pub speedup: f64,
    /// `K²/T`.
    pub local: f64,
    /// `τ²/T`.
    pub delay: f64,
    /// `T ≥ mK⁵` and `τ ≤ (T/(mK))^{1/4}`, where the first term dominates.
    pub regime: bool,
}

/// The three rate terms; the regime test is done in exact integer arithmetic.
pub fn rate_envelope(m: usize, k: usize, t: usize, tau: usize) -> RateEnvelope {
    let (mf, kf, tf, tauf) = (m as f64, k as f64, t as f64, tau as f64);
    let (m, k, t, tau) = (m as u128, k as u128, t as u128, tau as u128);
    let big = |v: Option<u128>| v.unwrap_or(u128::MAX);
    let mk5 = big(k.checked_pow(5).and_then(|v| v.checked_mul(m)));
    let tau4_mk = big(tau
        .checked_pow(4)
        .and_then(|v| v.checked_mul(m))
        .and_then(|v| v.checked_mul(k)));
    RateEnvelope {
        speedup: (1.0 / (mf * kf * tf)).sqrt(),
        local: kf * kf / tf,
        delay: tauf * tauf / tf,
        regime: t >= mk5 && tau4_mk <= t,
    }
}
