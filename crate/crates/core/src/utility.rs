//! Discounted CRRA and log utility stochastic fields.
//!
//! `U(t, x) = e^{-(δ - r) t} u(x)`: with the clock `e^{-rt} dt` this is the
//! time-preference utility `e^{-δt} u(x)` written against the clock density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum UtilityKind {
    Log,
    Crra { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityField {
    #[serde(flatten)]
    pub kind: UtilityKind,
    /// Preference rate `δ`.
    #[serde(default)]
    pub delta_pref: f64,
    /// Interest rate `r` carried by the clock.
    #[serde(default)]
    pub rate: f64,
}

impl UtilityField {
    pub fn log() -> Self {
        Self {
            kind: UtilityKind::Log,
            delta_pref: 0.0,
            rate: 0.0,
        }
    }

    pub fn crra(gamma: f64) -> Result<Self> {
        let u = Self {
            kind: UtilityKind::Crra { gamma },
            delta_pref: 0.0,
            rate: 0.0,
        };
        u.validate()?;
        Ok(u)
    }

    pub fn with_rates(mut self, delta_pref: f64, rate: f64) -> Self {
        self.delta_pref = delta_pref;
        self.rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let UtilityKind::Crra { gamma } = self.kind {
            if !(gamma > 0.0) || gamma == 1.0 || !gamma.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "CRRA needs gamma > 0, gamma != 1 (use log), got {gamma}"
                )));
            }
        }
        if !self.delta_pref.is_finite() || !self.rate.is_finite() {
            return Err(Error::InvalidInput("rates must be finite".into()));
        }
        Ok(())
    }

    /// Relative risk aversion (1 for log).
    pub fn gamma(&self) -> f64 {
        match self.kind {
            UtilityKind::Log => 1.0,
            UtilityKind::Crra { gamma } => gamma,
        }
    }

    /// `e^{-(δ - r) t}`.
    pub fn discount(&self, t: f64) -> f64 {
        (-(self.delta_pref - self.rate) * t).exp()
    }

    /// Undiscounted `u(x)`.
    pub fn base(&self, x: f64) -> f64 {
        match self.kind {
            UtilityKind::Log => x.ln(),
            UtilityKind::Crra { gamma } => x.powf(1.0 - gamma) / (1.0 - gamma),
        }
    }

    /// Undiscounted `u'(x)`.
    pub fn base_marginal(&self, x: f64) -> f64 {
        match self.kind {
            UtilityKind::Log => 1.0 / x,
            UtilityKind::Crra { gamma } => x.powf(-gamma),
        }
    }

    /// Undiscounted inverse marginal `i(η) = η^{-1/γ}`.
    pub fn base_inverse(&self, eta: f64) -> f64 {
        match self.kind {
            UtilityKind::Log => 1.0 / eta,
            UtilityKind::Crra { gamma } => eta.powf(-1.0 / gamma),
        }
    }

    /// Undiscounted conjugate `ṽ(η) = sup_x u(x) - xη`.
    pub fn base_conjugate(&self, eta: f64) -> f64 {
        match self.kind {
            UtilityKind::Log => -eta.ln() - 1.0,
            UtilityKind::Crra { gamma } => eta.powf((gamma - 1.0) / gamma) * gamma / (1.0 - gamma),
        }
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        self.discount(t) * self.base(x)
    }

    pub fn marginal(&self, t: f64, x: f64) -> f64 {
        self.discount(t) * self.base_marginal(x)
    }

    /// `U''(t, x)` (negative).
    pub fn curvature(&self, t: f64, x: f64) -> f64 {
        -self.gamma() * self.marginal(t, x) / x
    }

    /// `I(t, y) = (U')^{-1}(t, y)`.
    pub fn inverse_marginal(&self, t: f64, y: f64) -> f64 {
        self.base_inverse(y / self.discount(t))
    }

    /// `V(t, y) = sup_x U(t, x) - xy`.
    pub fn conjugate(&self, t: f64, y: f64) -> f64 {
        let d = self.discount(t);
        d * self.base_conjugate(y / d)
    }
}
