//! Marginal penalties and their convex conjugates.
//!
//! Only the conjugate `f̄` of a generator enters the training objective. For a
//! scaled generator `tau * f` the conjugate is `tau * f̄(t / tau)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    /// `tau * (t log t - t + 1)`
    ScaledKl,
    /// `tau * (t - 1)^2` on `t >= 0`
    ScaledChi2,
    /// Convex indicator of `{1}`: hard marginal constraint.
    Balanced,
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DivergenceKind::ScaledKl => "scaled_kl",
            DivergenceKind::ScaledChi2 => "scaled_chi2",
            DivergenceKind::Balanced => "balanced",
        })
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled_kl" | "kl" => Ok(DivergenceKind::ScaledKl),
            "scaled_chi2" | "chi2" => Ok(DivergenceKind::ScaledChi2),
            "balanced" => Ok(DivergenceKind::Balanced),
            other => Err(Error::InvalidArgument(format!("unknown divergence kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSpec {
    pub kind: DivergenceKind,
    pub tau: f64,
}

impl DivergenceSpec {
    pub fn new(kind: DivergenceKind, tau: f64) -> Result<Self> {
        if kind != DivergenceKind::Balanced && !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        Ok(Self { kind, tau })
    }

    pub fn kl(tau: f64) -> Self {
        Self::new(DivergenceKind::ScaledKl, tau).expect("positive tau")
    }

    pub fn chi2(tau: f64) -> Self {
        Self::new(DivergenceKind::ScaledChi2, tau).expect("positive tau")
    }

    pub fn balanced() -> Self {
        Self { kind: DivergenceKind::Balanced, tau: 1.0 }
    }

    /// Convex conjugate `f̄(t)`. May overflow to `+inf` for the KL kind with
    /// very large `t / tau`; callers decide how to report that.
    pub fn conjugate(&self, t: f64) -> f64 {
        let tau = self.tau;
        match self.kind {
            DivergenceKind::ScaledKl => tau * (t / tau).exp_m1(),
            DivergenceKind::ScaledChi2 => {
                let s = t / tau;
                if s < -2.0 {
                    -tau
                } else {
                    tau * (0.25 * s * s + s)
                }
            }
            DivergenceKind::Balanced => t,
        }
    }

    /// Derivative of [`conjugate`](Self::conjugate). At the chi-square kink
    /// `t / tau = -2` both one-sided derivatives are 0.
    pub fn conjugate_deriv(&self, t: f64) -> f64 {
        let tau = self.tau;
        match self.kind {
            DivergenceKind::ScaledKl => (t / tau).exp(),
            DivergenceKind::ScaledChi2 => {
                let s = t / tau;
                if s < -2.0 {
                    0.0
                } else {
                    0.5 * s + 1.0
                }
            }
            DivergenceKind::Balanced => 1.0,
        }
    }

    /// Generator `f(r)` evaluated on a density ratio. Used only by the
    /// validation oracles to price discrete plans.
    pub fn generator(&self, r: f64) -> f64 {
        let tau = self.tau;
        match self.kind {
            DivergenceKind::ScaledKl => {
                if r == 0.0 {
                    tau
                } else if r > 0.0 {
                    tau * (r * r.ln() - r + 1.0)
                } else {
                    f64::INFINITY
                }
            }
            DivergenceKind::ScaledChi2 => {
                if r >= 0.0 {
                    tau * (r - 1.0) * (r - 1.0)
                } else {
                    f64::INFINITY
                }
            }
            DivergenceKind::Balanced => {
                if r == 1.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Derivative of the generator on `r > 0` (unbalanced kinds only).
    pub fn generator_deriv(&self, r: f64) -> f64 {
        match self.kind {
            DivergenceKind::ScaledKl => self.tau * r.ln(),
            DivergenceKind::ScaledChi2 => 2.0 * self.tau * (r - 1.0),
            DivergenceKind::Balanced => f64::NAN,
        }
    }
}
