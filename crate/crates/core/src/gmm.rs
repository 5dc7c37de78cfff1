//! Unnormalized Gaussian mixtures with diagonal covariances.
//!
//! A mixture stores log-weights, means and log-diagonal covariances. The
//! density of component `k` is `N(x | mean_k, epsilon * diag(exp(log_diag_covs_k)))`,
//! so the entropic scale `epsilon` is supplied at evaluation time rather than
//! baked into the parameters. Weights are not required to sum to one; the
//! total mass of the mixture is the sum of the weights.

use ndarray::{Array1, Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, LN_2PI};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    log_weights: Array1<f64>,
    means: Array2<f64>,
    log_diag_covs: Array2<f64>,
}

impl GaussianMixture {
    pub fn new(
        log_weights: Array1<f64>,
        means: Array2<f64>,
        log_diag_covs: Array2<f64>,
    ) -> Result<Self> {
        let c = log_weights.len();
        if c == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        if means.nrows() != c {
            return Err(Error::DimensionMismatch { expected: c, got: means.nrows() });
        }
        if means.ncols() == 0 {
            return Err(Error::InvalidArgument("mixture dimension must be positive".into()));
        }
        if log_diag_covs.dim() != means.dim() {
            return Err(Error::DimensionMismatch {
                expected: means.len(),
                got: log_diag_covs.len(),
            });
        }
        fn finite<'a>(what: &'static str, mut it: impl Iterator<Item = &'a f64>) -> Result<()> {
            match it.position(|v| !v.is_finite()) {
                Some(index) => Err(Error::NonFinite { what, index }),
                None => Ok(()),
            }
        }
        finite("log_weights", log_weights.iter())?;
        finite("means", means.iter())?;
        finite("log_diag_covs", log_diag_covs.iter())?;
        Ok(Self { log_weights, means, log_diag_covs })
    }

    /// Single component with unit weight and the given mean and diagonal
    /// (pre-epsilon) covariance.
    pub fn single(mean: &[f64], diag_cov: &[f64]) -> Result<Self> {
        let d = mean.len();
        let means = Array2::from_shape_vec((1, d), mean.to_vec())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let covs = Array2::from_shape_vec((1, d), diag_cov.iter().map(|s| s.ln()).collect())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(Array1::zeros(1), means, covs)
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn n_components(&self) -> usize {
        self.log_weights.len()
    }

    pub fn log_weights(&self) -> &Array1<f64> {
        &self.log_weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn log_diag_covs(&self) -> &Array2<f64> {
        &self.log_diag_covs
    }

    pub fn mean(&self, k: usize) -> ArrayView1<'_, f64> {
        self.means.row(k)
    }

    /// Pre-epsilon diagonal covariance of component `k`.
    pub fn diag_cov(&self, k: usize) -> Array1<f64> {
        self.log_diag_covs.row(k).mapv(f64::exp)
    }

    /// Sum of the component weights.
    pub fn total_mass(&self) -> f64 {
        self.log_weights.iter().map(|w| w.exp()).sum()
    }

    pub(crate) fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "input point", index });
        }
        Ok(())
    }

    /// Per-component `log alpha_k + log N(x | r_k, epsilon S_k)` written into `out`.
    pub(crate) fn component_log_terms(&self, epsilon: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim() as f64;
        for (k, o) in out.iter_mut().enumerate() {
            let mean = self.means.row(k);
            let lcov = self.log_diag_covs.row(k);
            let mut quad = 0.0;
            let mut log_det = 0.0;
            for i in 0..x.len() {
                let diff = x[i] - mean[i];
                quad += diff * diff * (-lcov[i]).exp() / epsilon;
                log_det += lcov[i];
            }
            log_det += d * epsilon.ln();
            *o = self.log_weights[k] - 0.5 * (d * LN_2PI + log_det + quad);
        }
    }

    /// `log sum_k alpha_k N(x | r_k, epsilon S_k)`, evaluated with log-sum-exp.
    pub fn log_density(&self, epsilon: f64, x: &[f64]) -> Result<f64> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        self.check_point(x)?;
        let mut terms = vec![0.0; self.n_components()];
        self.component_log_terms(epsilon, x, &mut terms);
        Ok(log_sum_exp(&terms))
    }

    /// Draws `n` points: a component with probability proportional to its
    /// weight, then a Gaussian with covariance `epsilon * diag(S_k)`.
    pub fn sample<R: Rng + ?Sized>(&self, epsilon: f64, rng: &mut R, n: usize) -> Array2<f64> {
        let d = self.dim();
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let probs: Vec<f64> = self.log_weights.iter().map(|w| (w - max).exp()).collect();
        let picker = WeightedIndex::new(&probs).expect("log-weights are finite");
        let stds: Array2<f64> = self.log_diag_covs.mapv(|l| (epsilon * l.exp()).sqrt());
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            let k = picker.sample(rng);
            for i in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                row[i] = self.means[[k, i]] + stds[[k, i]] * z;
            }
        }
        out
    }

    /// Length of the packed parameter vector for `c` components in dimension `d`.
    pub fn packed_len(c: usize, d: usize) -> usize {
        c * (2 * d + 1)
    }

    /// Flat layout: `[log_weights (C), means (C*d, row-major), log_diag_covs (C*d, row-major)]`.
    pub fn pack_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::packed_len(self.n_components(), self.dim()));
        v.extend(self.log_weights.iter());
        v.extend(self.means.iter());
        v.extend(self.log_diag_covs.iter());
        v
    }

    pub fn unpack_params(v: &[f64], dim: usize, c: usize) -> Result<Self> {
        let expected = Self::packed_len(c, dim);
        if v.len() != expected {
            return Err(Error::InvalidLength { expected, got: v.len() });
        }
        let (lw, rest) = v.split_at(c);
        let (means, covs) = rest.split_at(c * dim);
        let shape_err = |e: ndarray::ShapeError| Error::InvalidArgument(e.to_string());
        Self::new(
            Array1::from_vec(lw.to_vec()),
            Array2::from_shape_vec((c, dim), means.to_vec()).map_err(shape_err)?,
            Array2::from_shape_vec((c, dim), covs.to_vec()).map_err(shape_err)?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{quadrature, Grid};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mixture(rng: &mut ChaCha8Rng, c: usize, d: usize) -> GaussianMixture {
        let lw = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
        let means = Array2::from_shape_fn((c, d), |_| rng.random_range(-2.0..2.0));
        let covs = Array2::from_shape_fn((c, d), |_| rng.random_range(-1.0..0.5));
        GaussianMixture::new(lw, means, covs).unwrap()
    }

    #[test]
    fn standard_normal_at_mode() {
        let m = GaussianMixture::single(&[0.0], &[1.0]).unwrap();
        let v = m.log_density(1.0, &[0.0]).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn duplicated_components_collapse() {
        let half = 0.5f64.ln();
        let m2 = GaussianMixture::new(
            array![half, half],
            array![[0.3, -1.0], [0.3, -1.0]],
            array![[0.2, -0.4], [0.2, -0.4]],
        )
        .unwrap();
        let m1 = GaussianMixture::new(array![0.0], array![[0.3, -1.0]], array![[0.2, -0.4]]).unwrap();
        for x in [[0.0, 0.0], [1.5, -2.0], [-3.0, 4.0]] {
            let a = m2.log_density(0.7, &x).unwrap();
            let b = m1.log_density(0.7, &x).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_density_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = random_mixture(&mut rng, 2, 2);
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let eps = 0.8;
            // direct, non-log evaluation
            let mut direct = 0.0;
            for k in 0..2 {
                let mut dens = m.log_weights()[k].exp();
                for i in 0..2 {
                    let var = eps * m.log_diag_covs()[[k, i]].exp();
                    let diff = x[i] - m.means()[[k, i]];
                    dens *= (-diff * diff / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
                }
                direct += dens;
            }
            let got = m.log_density(eps, &x).unwrap().exp();
            assert!(((got - direct) / direct).abs() < 1e-12, "{got} vs {direct}");
        }
    }

    #[test]
    fn log_density_survives_extreme_exponents() {
        let m = GaussianMixture::single(&[0.0], &[1.0]).unwrap();
        // quadratic form of 1e4 / 2
        let v = m.log_density(1.0, &[100.0 * 2f64.sqrt()]).unwrap();
        assert!(v.is_finite());
        assert!((v + 0.918_938_533_204_672_7 + 1.0e4).abs() < 1e-8);
    }

    #[test]
    fn log_density_errors() {
        let m = GaussianMixture::single(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(matches!(
            m.log_density(1.0, &[0.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(matches!(
            m.log_density(1.0, &[0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn total_mass_examples() {
        let mk = |lw: Vec<f64>| {
            let c = lw.len();
            GaussianMixture::new(Array1::from_vec(lw), Array2::zeros((c, 1)), Array2::zeros((c, 1)))
                .unwrap()
        };
        assert_eq!(mk(vec![0.0, 0.0]).total_mass(), 2.0);
        assert!((mk(vec![0.25f64.ln(), 0.75f64.ln()]).total_mass() - 1.0).abs() < 1e-15);
        assert!((mk(vec![1.5]).total_mass() - 4.481_689_070_338_065).abs() < 1e-12);
    }

    #[test]
    fn degenerate_covariance_samples_sit_on_mean() {
        let m = GaussianMixture::single(&[5.0, 5.0], &[1.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = m.sample(1e-12, &mut rng, 1000);
        assert!(s.iter().all(|v| (v - 5.0).abs() < 1e-4));
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        let m = GaussianMixture::single(&[1.5, -0.5], &[2.0, 0.5]).unwrap();
        let eps = 0.3;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = m.sample(eps, &mut rng, n);
        let mean = s.mean_axis(ndarray::Axis(0)).unwrap();
        for (i, (&mu, &var)) in [1.5, -0.5].iter().zip(&[2.0 * eps, 0.5 * eps]).enumerate() {
            let bound = 4.0 * (var as f64).sqrt() / (n as f64).sqrt();
            assert!((mean[i] - mu).abs() < bound, "coord {i}: {} vs {mu}", mean[i]);
        }
    }

    #[test]
    fn sample_component_frequencies() {
        let m = GaussianMixture::new(
            array![0.25f64.ln(), 0.75f64.ln()],
            array![[-10.0], [10.0]],
            array![[0.0], [0.0]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let s = m.sample(0.01, &mut rng, n);
        let freq = s.iter().filter(|v| **v < 0.0).count() as f64 / n as f64;
        // 4 sigma of a binomial(1e5, 0.25) frequency is ~0.0055
        assert!((freq - 0.25).abs() < 0.01, "{freq}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_mixture(&mut rng, 3, 2);
        let a = m.sample(0.5, &mut ChaCha8Rng::seed_from_u64(1), 64);
        let b = m.sample(0.5, &mut ChaCha8Rng::seed_from_u64(1), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn pack_layout() {
        let m = GaussianMixture::new(array![0.0], array![[2.0]], array![[0.0]]).unwrap();
        assert_eq!(m.pack_params(), vec![0.0, 2.0, 0.0]);
        let m = GaussianMixture::new(
            array![0.1, 0.2],
            array![[1.0, 2.0], [3.0, 4.0]],
            array![[5.0, 6.0], [7.0, 8.0]],
        )
        .unwrap();
        assert_eq!(m.pack_params(), vec![0.1, 0.2, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        let v = vec![0.0; GaussianMixture::packed_len(3, 2) - 1];
        assert!(matches!(
            GaussianMixture::unpack_params(&v, 2, 3),
            Err(Error::InvalidLength { expected: 15, got: 14 })
        ));
    }

    #[test]
    fn normalized_mixture_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for d in [1usize, 2] {
            for eps in [0.05, 1.0] {
                let mut m = random_mixture(&mut rng, 3, d);
                let shift = m.total_mass().ln();
                m.log_weights.mapv_inplace(|w| w - shift);
                let max_s = m.log_diag_covs.iter().copied().fold(f64::MIN, f64::max).exp();
                let half = 8.0 * (eps * max_s).sqrt();
                let min_s = m.log_diag_covs.iter().copied().fold(f64::MAX, f64::min).exp();
                let h = (eps * min_s).sqrt() / 3.0;
                let axes: Vec<(f64, f64)> = (0..d)
                    .map(|i| {
                        let col = m.means.column(i);
                        let lo = col.iter().copied().fold(f64::MAX, f64::min) - half;
                        let hi = col.iter().copied().fold(f64::MIN, f64::max) + half;
                        (lo, hi)
                    })
                    .collect();
                let n = axes.iter().map(|(lo, hi)| ((hi - lo) / h).ceil() as usize).max().unwrap();
                let grid = Grid::new(&axes, n.max(16)).unwrap();
                let total = quadrature(|x| m.log_density(eps, x).unwrap().exp(), &grid).unwrap();
                assert!((total - 1.0).abs() < 1e-6, "d={d} eps={eps}: {total}");
            }
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(
            c in 1usize..5,
            d in 1usize..4,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mixture(&mut rng, c, d);
            let back = GaussianMixture::unpack_params(&m.pack_params(), d, c).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn permutation_invariance(seed in any::<u64>(), x0 in -3.0f64..3.0, x1 in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mixture(&mut rng, 3, 2);
            let order = [2usize, 0, 1];
            let p = GaussianMixture::new(
                Array1::from_iter(order.iter().map(|&k| m.log_weights[k])),
                ndarray::stack(ndarray::Axis(0), &order.map(|k| m.means.row(k))).unwrap(),
                ndarray::stack(ndarray::Axis(0), &order.map(|k| m.log_diag_covs.row(k))).unwrap(),
            ).unwrap();
            let a = m.log_density(0.3, &[x0, x1]).unwrap();
            let b = p.log_density(0.3, &[x0, x1]).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn density_is_finite_and_nonnegative(seed in any::<u64>(), x0 in -50.0f64..50.0, x1 in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mixture(&mut rng, 4, 2);
            let v = m.log_density(0.05, &[x0, x1]).unwrap();
            prop_assert!(!v.is_nan());
            let dens = v.exp();
            prop_assert!(dens.is_finite() && dens >= 0.0);
        }
    }
}
