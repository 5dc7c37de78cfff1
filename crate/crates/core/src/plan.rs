//! The parametrized transport plan `gamma(x, y) = u(x) * gamma(y | x)`.
//!
//! `u` is an unnormalized Gaussian mixture describing the left marginal, `v`
//! an unnormalized mixture whose exponential tilt `exp(<x, y> / epsilon) v(y)`
//! gives the conditional plan. Both the normalizer `c(x)` and the conditional
//! are available in closed form for diagonal covariances.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::divergence::DivergenceSpec;
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::math::{dot, log_sum_exp, sq_norm};

#[derive(Debug, Clone, PartialEq)]
pub struct PlanModel {
    epsilon: f64,
    /// Conditional potential (K components).
    pub v: GaussianMixture,
    /// Left marginal (L components).
    pub u: GaussianMixture,
    pub div1: DivergenceSpec,
    pub div2: DivergenceSpec,
}

/// `gamma(. | x)` as a normalized mixture with covariances already scaled by
/// epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMixture {
    pub log_weights_normalized: Array1<f64>,
    pub means: Array2<f64>,
    pub diag_covs: Array2<f64>,
}

impl ConditionalMixture {
    /// The same measure as a [`GaussianMixture`] to be evaluated at `epsilon = 1`.
    pub fn to_mixture(&self) -> GaussianMixture {
        GaussianMixture::new(
            self.log_weights_normalized.clone(),
            self.means.clone(),
            self.diag_covs.mapv(f64::ln),
        )
        .expect("conditional parameters are finite")
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        self.to_mixture().log_density(1.0, y)
    }

    pub fn mean(&self) -> Array1<f64> {
        let w = self.log_weights_normalized.mapv(f64::exp);
        w.dot(&self.means)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Array2<f64> {
        self.to_mixture().sample(1.0, rng, n)
    }
}

impl PlanModel {
    pub fn new(
        epsilon: f64,
        v: GaussianMixture,
        u: GaussianMixture,
        div1: DivergenceSpec,
        div2: DivergenceSpec,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        if v.dim() != u.dim() {
            return Err(Error::DimensionMismatch { expected: v.dim(), got: u.dim() });
        }
        Ok(Self { epsilon, v, u, div1, div2 })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.v.dim()
    }

    /// Tilted log-weights `log alpha_k + (x^T S_k x + 2 r_k^T x) / (2 epsilon)`.
    pub(crate) fn tilted_log_weights(&self, x: &[f64], out: &mut [f64]) {
        let v = &self.v;
        for (k, o) in out.iter_mut().enumerate() {
            let r = v.means().row(k);
            let ls = v.log_diag_covs().row(k);
            let mut e = 0.0;
            for i in 0..x.len() {
                e += ls[i].exp() * x[i] * x[i] + 2.0 * r[i] * x[i];
            }
            *o = v.log_weights()[k] + e / (2.0 * self.epsilon);
        }
    }

    /// `log c(x) = log sum_k alpha_k exp{(x^T S_k x + 2 r_k^T x) / (2 epsilon)}`.
    pub fn log_c_theta(&self, x: &[f64]) -> Result<f64> {
        self.v.check_point(x)?;
        let mut e = vec![0.0; self.v.n_components()];
        self.tilted_log_weights(x, &mut e);
        Ok(log_sum_exp(&e))
    }

    pub fn conditional(&self, x: &[f64]) -> Result<ConditionalMixture> {
        self.v.check_point(x)?;
        let k = self.v.n_components();
        let d = self.dim();
        let mut e = vec![0.0; k];
        self.tilted_log_weights(x, &mut e);
        let lse = log_sum_exp(&e);
        let log_w = Array1::from_iter(e.iter().map(|v| v - lse));
        let s = self.v.log_diag_covs().mapv(f64::exp);
        let mut means = self.v.means().clone();
        for kk in 0..k {
            for i in 0..d {
                means[[kk, i]] += s[[kk, i]] * x[i];
            }
        }
        Ok(ConditionalMixture {
            log_weights_normalized: log_w,
            means,
            diag_covs: s * self.epsilon,
        })
    }

    /// Log-density of the joint plan at `(x, y)`.
    pub fn log_joint(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.v.check_point(y)?;
        let log_u = self.u.log_density(self.epsilon, x)?;
        let log_v = self.v.log_density(self.epsilon, y)?;
        let log_c = self.log_c_theta(x)?;
        Ok(log_u + dot(x, y) / self.epsilon + log_v - log_c)
    }

    /// Dual potentials `(phi(x), psi(y))` induced by the parametrization.
    pub fn potentials(&self, x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
        Ok((self.phi(x)?, self.psi(y)?))
    }

    /// `phi(x) = epsilon log(u(x) / c(x)) + |x|^2 / 2`
    pub fn phi(&self, x: &[f64]) -> Result<f64> {
        let log_u = self.u.log_density(self.epsilon, x)?;
        let log_c = self.log_c_theta(x)?;
        Ok(self.epsilon * (log_u - log_c) + 0.5 * sq_norm(x))
    }

    /// `psi(y) = epsilon log v(y) + |y|^2 / 2`
    pub fn psi(&self, y: &[f64]) -> Result<f64> {
        Ok(self.epsilon * self.v.log_density(self.epsilon, y)? + 0.5 * sq_norm(y))
    }

    /// Conditional means `E[y | x]` for each row of `xs`.
    pub fn conditional_means(&self, xs: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(xs.dim());
        for (i, x) in xs.rows().into_iter().enumerate() {
            let x = x.to_vec();
            out.row_mut(i).assign(&self.conditional(&x)?.mean());
        }
        Ok(out)
    }
}
