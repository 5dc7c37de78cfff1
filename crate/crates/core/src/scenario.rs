//! Synthetic source/target measures used by the experiments and the CLI.

use std::fmt;
use std::str::FromStr;

use ndarray::{array, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Two-mode source and target with swapped mode weights.
    GaussMix,
    /// `GaussMix` plus one far, narrow outlier mode on each side.
    GaussMixOutliers,
}

/// Weight and isotropic variance of the outlier modes.
pub const OUTLIER_WEIGHT: f64 = 0.05;
pub const OUTLIER_VARIANCE: f64 = 0.01;
/// Outlier centers. They sit more than five standard deviations (of the
/// 0.1-variance main modes) away from every main mode.
pub const OUTLIER_SOURCE: [f64; 2] = [-6.0, -3.0];
pub const OUTLIER_TARGET: [f64; 2] = [6.0, 6.0];

const MODE_VARIANCE: f64 = 0.1;

impl Scenario {
    /// Mode centers of the source measure, outlier last when present.
    pub fn source_centers(&self) -> Array2<f64> {
        self.with_outlier(array![[-3.0, 3.0], [1.0, 3.0]], OUTLIER_SOURCE)
    }

    pub fn target_centers(&self) -> Array2<f64> {
        self.with_outlier(array![[-3.0, 0.0], [1.0, 0.0]], OUTLIER_TARGET)
    }

    fn with_outlier(&self, mut centers: Array2<f64>, outlier: [f64; 2]) -> Array2<f64> {
        if *self == Scenario::GaussMixOutliers {
            centers.push_row(ndarray::aview1(&outlier)).expect("2d centers");
        }
        centers
    }

    /// The source measure as a mixture with covariances given at epsilon = 1.
    pub fn source(&self) -> GaussianMixture {
        self.mixture(self.source_centers(), &[0.25, 0.75])
    }

    pub fn target(&self) -> GaussianMixture {
        self.mixture(self.target_centers(), &[0.75, 0.25])
    }

    fn mixture(&self, means: Array2<f64>, main_weights: &[f64]) -> GaussianMixture {
        let (weights, vars) = match self {
            Scenario::GaussMix => (main_weights.to_vec(), vec![MODE_VARIANCE; 2]),
            Scenario::GaussMixOutliers => {
                let mut w: Vec<f64> = main_weights.iter().map(|w| w * (1.0 - OUTLIER_WEIGHT)).collect();
                w.push(OUTLIER_WEIGHT);
                (w, vec![MODE_VARIANCE, MODE_VARIANCE, OUTLIER_VARIANCE])
            }
        };
        let c = means.nrows();
        let log_covs = Array2::from_shape_fn((c, 2), |(k, _)| vars[k].ln());
        GaussianMixture::new(Array1::from_iter(weights.iter().map(|w| w.ln())), means, log_covs)
            .expect("scenario constants are valid")
    }

    pub fn sample_source<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Array2<f64> {
        self.source().sample(1.0, rng, n)
    }

    pub fn sample_target<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Array2<f64> {
        self.target().sample(1.0, rng, n)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::GaussMix => "gauss_mix",
            Scenario::GaussMixOutliers => "gauss_mix_outliers",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss_mix" => Ok(Scenario::GaussMix),
            "gauss_mix_outliers" => Ok(Scenario::GaussMixOutliers),
            other => Err(Error::InvalidArgument(format!("unknown scenario `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mode_assignment;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn source_mode_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs = Scenario::GaussMix.sample_source(&mut rng, 100_000);
        let left = xs.column(0).iter().filter(|v| **v < -1.0).count() as f64 / 1e5;
        assert!((left - 0.25).abs() < 0.01, "{left}");
        let ys = Scenario::GaussMix.sample_target(&mut rng, 100_000);
        let left = ys.column(0).iter().filter(|v| **v < -1.0).count() as f64 / 1e5;
        assert!((left - 0.75).abs() < 0.01, "{left}");
    }

    #[test]
    fn outliers_are_far_from_main_modes() {
        let sd = MODE_VARIANCE.sqrt();
        for (outlier, centers) in [
            (OUTLIER_SOURCE, Scenario::GaussMix.source_centers()),
            (OUTLIER_TARGET, Scenario::GaussMix.target_centers()),
        ] {
            for c in centers.rows() {
                let dist = ((c[0] - outlier[0]).powi(2) + (c[1] - outlier[1]).powi(2)).sqrt();
                assert!(dist > 5.0 * sd);
            }
        }
        let src = Scenario::GaussMixOutliers.source();
        assert!((src.total_mass() - 1.0).abs() < 1e-12);
        assert_eq!(src.n_components(), 3);
    }

    #[test]
    fn outlier_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = Scenario::GaussMixOutliers.sample_source(&mut rng, 40_000);
        let centers = Scenario::GaussMixOutliers.source_centers();
        let m = mode_assignment(&xs, &xs, &centers, &centers).unwrap();
        assert_eq!(m, Array2::<f64>::eye(3));
        let frac = xs.rows().into_iter().filter(|r| r[1] < 0.0).count() as f64 / 40_000.0;
        assert!((frac - OUTLIER_WEIGHT).abs() < 0.005, "{frac}");
    }

    #[test]
    fn parse_and_display() {
        for s in [Scenario::GaussMix, Scenario::GaussMixOutliers] {
            assert_eq!(s.to_string().parse::<Scenario>().unwrap(), s);
        }
        assert!("moons".parse::<Scenario>().is_err());
    }
}
