//! Evaluation metrics for learned plans: normalized transport cost, empirical
//! W2 between generated and target samples, learned mass and a mode-to-mode
//! transport matrix.

use ndarray::{Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{optimal_matching_cost, MAX_W2_SAMPLES};
use crate::plan::PlanModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Monte-Carlo estimate of `E_x E_{y ~ gamma(y|x)} |x - y|^2 / (2 d)`, the
/// transport cost per coordinate, drawing `draws_per_x` targets for every
/// source sample.
pub fn normalized_ot_cost<R: Rng + ?Sized>(
    plan: &PlanModel,
    samples_x: &Array2<f64>,
    draws_per_x: usize,
    rng: &mut R,
) -> Result<CostEstimate> {
    if samples_x.nrows() == 0 {
        return Err(Error::InvalidArgument("no source samples".into()));
    }
    if draws_per_x == 0 {
        return Err(Error::InvalidArgument("draws_per_x must be positive".into()));
    }
    let d = plan.dim();
    if samples_x.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: samples_x.ncols() });
    }
    // per-x averages are i.i.d., so their spread gives the standard error
    let mut per_x = Vec::with_capacity(samples_x.nrows());
    for x in samples_x.rows() {
        let x = x.as_slice().expect("standard layout");
        let ys = plan.conditional(x)?.sample(rng, draws_per_x);
        let mut acc = 0.0;
        for y in ys.rows() {
            acc += y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        per_x.push(acc / (2.0 * d as f64 * draws_per_x as f64));
    }
    let n = per_x.len() as f64;
    let mean = per_x.iter().sum::<f64>() / n;
    let std_err = if per_x.len() > 1 {
        let var = per_x.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(CostEstimate { mean, std_err })
}

fn nearest(centers: &Array2<f64>, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.rows().into_iter().enumerate() {
        let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Row-normalized frequencies of (nearest source center of `x_i`, nearest
/// target center of `y_i`) over paired samples. Rows of source centers that
/// receive no samples are uniform.
pub fn mode_assignment(
    samples_from: &Array2<f64>,
    generated: &Array2<f64>,
    centers_src: &Array2<f64>,
    centers_tgt: &Array2<f64>,
) -> Result<Array2<f64>> {
    if centers_src.nrows() == 0 || centers_tgt.nrows() == 0 {
        return Err(Error::InvalidArgument("mode centers must be non-empty".into()));
    }
    if samples_from.nrows() != generated.nrows() {
        return Err(Error::DimensionMismatch { expected: samples_from.nrows(), got: generated.nrows() });
    }
    let d = samples_from.ncols();
    for m in [generated, centers_src, centers_tgt] {
        if m.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: m.ncols() });
        }
    }
    let mut counts = Array2::<f64>::zeros((centers_src.nrows(), centers_tgt.nrows()));
    for (x, y) in samples_from.rows().into_iter().zip(generated.rows()) {
        let i = nearest(centers_src, x.as_slice().expect("standard layout"));
        let j = nearest(centers_tgt, y.as_slice().expect("standard layout"));
        counts[[i, j]] += 1.0;
    }
    let cols = counts.ncols() as f64;
    for mut row in counts.rows_mut() {
        let total = row.sum();
        if total > 0.0 {
            row /= total;
        } else {
            row.fill(1.0 / cols);
        }
    }
    Ok(counts)
}

/// Evaluation summary written by the CLI as a flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ot_cost: f64,
    pub ot_cost_se: f64,
    pub w2: f64,
    pub learned_mass: f64,
    pub mode_matrix: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub elapsed_seconds: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub draws_per_x: usize,
    /// Samples per side for the exact W2.
    pub w2_samples: usize,
    pub centers_src: Array2<f64>,
    pub centers_tgt: Array2<f64>,
}

impl EvalOptions {
    pub fn new(centers_src: Array2<f64>, centers_tgt: Array2<f64>) -> Self {
        Self { draws_per_x: 1, w2_samples: 1024, centers_src, centers_tgt }
    }
}

/// Uniform subsample of `count` rows without replacement (all rows if the
/// data set is smaller).
pub fn subsample<R: Rng + ?Sized>(data: &Array2<f64>, count: usize, rng: &mut R) -> Array2<f64> {
    let n = data.nrows();
    if count >= n {
        return data.clone();
    }
    let idx = sample_indices(rng, n, count).into_vec();
    data.select(Axis(0), &idx)
}

/// One conditional draw per source row.
pub fn generate<R: Rng + ?Sized>(plan: &PlanModel, samples_x: &Array2<f64>, rng: &mut R) -> Result<Array2<f64>> {
    let d = plan.dim();
    if samples_x.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: samples_x.ncols() });
    }
    let mut out = Array2::zeros((samples_x.nrows(), d));
    for (x, mut row) in samples_x.rows().into_iter().zip(out.rows_mut()) {
        let y = plan.conditional(x.as_slice().expect("standard layout"))?.sample(rng, 1);
        row.assign(&y.row(0));
    }
    Ok(out)
}

/// Optimal matching cost between equal-size samples under the same per-coordinate
/// normalization as [`normalized_ot_cost`]: `min_pi mean |x_i - y_pi(i)|^2 / (2 d)`.
/// This is the squared 2-Wasserstein distance of the samples divided by `2 d`.
pub fn normalized_w2(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    Ok(optimal_matching_cost(a, b)? / a.ncols() as f64)
}

/// Computes every metric of a plan against held samples of both marginals.
pub fn evaluate<R: Rng + ?Sized>(
    plan: &PlanModel,
    samples_x: &Array2<f64>,
    samples_y: &Array2<f64>,
    options: &EvalOptions,
    rng: &mut R,
) -> Result<MetricReport> {
    if samples_y.ncols() != plan.dim() {
        return Err(Error::DimensionMismatch { expected: plan.dim(), got: samples_y.ncols() });
    }
    if options.w2_samples == 0 || options.w2_samples > MAX_W2_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "W2 subsample size must lie in 1..={MAX_W2_SAMPLES}"
        )));
    }
    let cost = normalized_ot_cost(plan, samples_x, options.draws_per_x, rng)?;
    let generated = generate(plan, samples_x, rng)?;
    let modes = mode_assignment(samples_x, &generated, &options.centers_src, &options.centers_tgt)?;
    let m = options.w2_samples.min(samples_x.nrows()).min(samples_y.nrows());
    let gen_sub = subsample(&generated, m, rng);
    let tgt_sub = subsample(samples_y, m, rng);
    let w2 = normalized_w2(&gen_sub, &tgt_sub)?;
    Ok(MetricReport {
        ot_cost: cost.mean,
        ot_cost_se: cost.std_err,
        w2,
        learned_mass: plan.u.total_mass(),
        mode_matrix: modes.rows().into_iter().map(|r| r.to_vec()).collect(),
        elapsed_seconds: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::DivergenceSpec;
    use crate::gmm::GaussianMixture;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_plan(eps: f64, r: f64, s: f64) -> PlanModel {
        let v = GaussianMixture::single(&[r], &[s]).unwrap();
        let u = GaussianMixture::single(&[0.0], &[1.0]).unwrap();
        PlanModel::new(eps, v, u, DivergenceSpec::kl(1.0), DivergenceSpec::kl(1.0)).unwrap()
    }

    #[test]
    fn identity_like_plan_has_near_zero_cost() {
        // conditional N(r + S x, eps S) with S = 1, r = 0 and tiny eps
        let plan = single_plan(1e-8, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = Array2::from_shape_fn((500, 1), |_| rng.random_range(-2.0..2.0));
        let est = normalized_ot_cost(&plan, &xs, 1, &mut rng).unwrap();
        assert!(est.mean < 1e-7, "{}", est.mean);
    }

    #[test]
    fn single_component_matches_closed_form() {
        let (eps, r, s) = (0.3, 0.7, 1.6);
        let plan = single_plan(eps, r, s);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = Array2::from_shape_fn((4000, 1), |_| rng.random_range(-1.5..1.5));
        let est = normalized_ot_cost(&plan, &xs, 4, &mut rng).unwrap();
        let exact: f64 = xs
            .iter()
            .map(|x| 0.5 * ((x - r - s * x).powi(2) + eps * s))
            .sum::<f64>()
            / xs.nrows() as f64;
        assert!((est.mean - exact).abs() <= 4.0 * est.std_err, "{} vs {exact} (se {})", est.mean, est.std_err);
    }

    #[test]
    fn identity_assignment() {
        let centers = array![[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = Array2::from_shape_fn((300, 2), |(i, j)| centers[[i % 3, j]] + rng.random_range(-0.5..0.5));
        let m = mode_assignment(&xs, &xs, &centers, &centers).unwrap();
        assert_eq!(m, Array2::<f64>::eye(3));
    }

    #[test]
    fn single_target_gives_one_hot_columns() {
        let src = array![[0.0], [10.0]];
        let tgt = array![[-1.0], [1.0], [3.0]];
        let xs = array![[0.1], [9.0], [0.2], [11.0]];
        let gen = Array2::from_elem((4, 1), 3.1);
        let m = mode_assignment(&xs, &gen, &src, &tgt).unwrap();
        assert_eq!(m, array![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn empty_rows_are_uniform_and_rows_sum_to_one() {
        let src = array![[0.0], [10.0]];
        let tgt = array![[-1.0], [1.0]];
        let xs = array![[0.1], [0.3], [-0.2]];
        let gen = array![[-1.0], [1.0], [1.2]];
        let m = mode_assignment(&xs, &gen, &src, &tgt).unwrap();
        assert_eq!(m.row(1).to_vec(), vec![0.5, 0.5]);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        assert!(mode_assignment(&xs, &gen, &Array2::zeros((0, 1)), &tgt).is_err());
    }

    #[test]
    fn evaluate_reports_mass_and_shapes() {
        let u = GaussianMixture::new(
            Array1::from(vec![0.2f64.ln(), 0.5f64.ln()]),
            array![[0.0], [1.0]],
            array![[0.0], [0.0]],
        )
        .unwrap();
        let v = GaussianMixture::single(&[0.0], &[1.0]).unwrap();
        let plan = PlanModel::new(0.1, v, u, DivergenceSpec::kl(1.0), DivergenceSpec::kl(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = Array2::from_shape_fn((64, 1), |_| rng.random_range(-1.0..1.0));
        let ys = Array2::from_shape_fn((64, 1), |_| rng.random_range(-1.0..1.0));
        let opts = EvalOptions::new(array![[-1.0], [1.0]], array![[0.0]]);
        let rep = evaluate(&plan, &xs, &ys, &opts, &mut rng).unwrap();
        assert!((rep.learned_mass - 0.7).abs() < 1e-12);
        assert_eq!(rep.mode_matrix.len(), 2);
        assert!(rep.ot_cost >= 0.0 && rep.w2 >= 0.0);
    }
}
