//! Empirical objective, its analytic gradient, Adam, and the training loop.
//!
//! The objective of a plan on batches `x_1..x_N ~ p`, `y_1..y_M ~ q` is
//!
//! ```text
//! 1/N sum_i f1(-phi(x_i)) + 1/M sum_j f2(-psi(y_j)) + epsilon * |u|_1
//! ```
//!
//! with `f1`, `f2` the conjugates of the marginal penalties and `phi`, `psi`
//! the potentials induced by the plan (see [`PlanModel::phi`], [`PlanModel::psi`]).
//! Gradients are taken with respect to the packed parameters
//! `[pack(v), pack(u)]`; see [`GaussianMixture::pack_params`] for the layout.

use std::io::Write;

use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceSpec;
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::math::{log_sum_exp, softmax_into, sq_norm};
use crate::plan::PlanModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub div1: DivergenceSpec,
    pub div2: DivergenceSpec,
    /// Components of `v` (conditional potential).
    pub k: usize,
    /// Components of `u` (left marginal).
    pub l: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Optimize log-weights in the form `epsilon * log_weight`, which gives
    /// them an effective step size of `learning_rate / epsilon`.
    pub scale_log_weights: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            div1: DivergenceSpec::kl(1.0),
            div2: DivergenceSpec::kl(1.0),
            k: 5,
            l: 5,
            learning_rate: 3e-4,
            steps: 20_000,
            batch_size: 128,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            scale_log_weights: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.k == 0 || self.l == 0 {
            return bad("component counts must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        DivergenceSpec::new(self.div1.kind, self.div1.tau)?;
        DivergenceSpec::new(self.div2.kind, self.div2.tau)?;
        Ok(())
    }
}

/// Packed parameter vector `[pack(v), pack(u)]` of a plan.
pub fn pack_plan(plan: &PlanModel) -> Vec<f64> {
    let mut p = plan.v.pack_params();
    p.extend(plan.u.pack_params());
    p
}

/// Inverse of [`pack_plan`], reusing the epsilon, divergences and component
/// counts of `template`.
pub fn unpack_plan(params: &[f64], template: &PlanModel) -> Result<PlanModel> {
    let d = template.dim();
    let nv = GaussianMixture::packed_len(template.v.n_components(), d);
    let nu = GaussianMixture::packed_len(template.u.n_components(), d);
    if params.len() != nv + nu {
        return Err(Error::InvalidLength { expected: nv + nu, got: params.len() });
    }
    let v = GaussianMixture::unpack_params(&params[..nv], d, template.v.n_components())?;
    let u = GaussianMixture::unpack_params(&params[nv..], d, template.u.n_components())?;
    PlanModel::new(template.epsilon(), v, u, template.div1, template.div2)
}

fn check_batch(plan: &PlanModel, batch: &Array2<f64>, what: &'static str) -> Result<()> {
    if batch.nrows() == 0 {
        return Err(Error::InvalidArgument(format!("{what} batch is empty")));
    }
    if batch.ncols() != plan.dim() {
        return Err(Error::DimensionMismatch { expected: plan.dim(), got: batch.ncols() });
    }
    if let Some(index) = batch.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what, index });
    }
    Ok(())
}

/// Value of the empirical objective.
pub fn objective(plan: &PlanModel, batch_x: &Array2<f64>, batch_y: &Array2<f64>) -> Result<f64> {
    check_batch(plan, batch_x, "source")?;
    check_batch(plan, batch_y, "target")?;
    let eps = plan.epsilon();
    let mut source = 0.0;
    for (i, x) in batch_x.rows().into_iter().enumerate() {
        let x = x.as_slice().expect("standard layout");
        let arg = -plan.phi(x)?;
        let val = plan.div1.conjugate(arg);
        if !val.is_finite() {
            return Err(Error::NonFiniteObjective { term: "source", index: i });
        }
        source += val;
    }
    let mut target = 0.0;
    for (j, y) in batch_y.rows().into_iter().enumerate() {
        let y = y.as_slice().expect("standard layout");
        let arg = -plan.psi(y)?;
        let val = plan.div2.conjugate(arg);
        if !val.is_finite() {
            return Err(Error::NonFiniteObjective { term: "target", index: j });
        }
        target += val;
    }
    Ok(source / batch_x.nrows() as f64 + target / batch_y.nrows() as f64 + eps * plan.u.total_mass())
}

/// Objective value together with its exact gradient over the packed
/// parameters `[pack(v), pack(u)]`.
pub fn objective_and_grad(
    plan: &PlanModel,
    batch_x: &Array2<f64>,
    batch_y: &Array2<f64>,
) -> Result<(f64, Vec<f64>)> {
    check_batch(plan, batch_x, "source")?;
    check_batch(plan, batch_y, "target")?;
    let eps = plan.epsilon();
    let d = plan.dim();
    let (v, u) = (&plan.v, &plan.u);
    let (kc, lc) = (v.n_components(), u.n_components());
    let nv = GaussianMixture::packed_len(kc, d);
    let mut grad = vec![0.0; nv + GaussianMixture::packed_len(lc, d)];
    let (gv, gu) = grad.split_at_mut(nv);

    let s_v = v.log_diag_covs().mapv(f64::exp);
    let s_u = u.log_diag_covs().mapv(f64::exp);
    // offsets inside one packed mixture
    let mean_at = |c: usize, k: usize, i: usize| c + k * d + i;
    let cov_at = |c: usize, k: usize, i: usize| c + c * d + k * d + i;

    let mut tilt = vec![0.0; kc];
    let mut tilt_w = vec![0.0; kc];
    let mut uterm = vec![0.0; lc];
    let mut uresp = vec![0.0; lc];

    let n = batch_x.nrows() as f64;
    let mut source = 0.0;
    for (idx, x) in batch_x.rows().into_iter().enumerate() {
        let x = x.as_slice().expect("standard layout");
        plan.tilted_log_weights(x, &mut tilt);
        let log_c = softmax_into(&tilt, &mut tilt_w);
        u.component_log_terms(eps, x, &mut uterm);
        let log_u = softmax_into(&uterm, &mut uresp);
        let arg = eps * (log_c - log_u) - 0.5 * sq_norm(x);
        let val = plan.div1.conjugate(arg);
        let slope = plan.div1.conjugate_deriv(arg) / n;
        if !val.is_finite() || !slope.is_finite() {
            return Err(Error::NonFiniteObjective { term: "source", index: idx });
        }
        source += val;

        // d arg / d theta through log c(x)
        for k in 0..kc {
            let w = tilt_w[k] * slope;
            gv[k] += eps * w;
            for i in 0..d {
                gv[mean_at(kc, k, i)] += w * x[i];
                gv[cov_at(kc, k, i)] += 0.5 * w * s_v[[k, i]] * x[i] * x[i];
            }
        }
        // d arg / d omega through -eps log u(x)
        for l in 0..lc {
            let w = uresp[l] * slope;
            gu[l] -= eps * w;
            for i in 0..d {
                let diff = x[i] - u.means()[[l, i]];
                gu[mean_at(lc, l, i)] -= w * diff / s_u[[l, i]];
                gu[cov_at(lc, l, i)] -= eps * w * (-0.5 + diff * diff / (2.0 * eps * s_u[[l, i]]));
            }
        }
    }

    let mut vterm = vec![0.0; kc];
    let mut vresp = vec![0.0; kc];
    let m = batch_y.nrows() as f64;
    let mut target = 0.0;
    for (idx, y) in batch_y.rows().into_iter().enumerate() {
        let y = y.as_slice().expect("standard layout");
        v.component_log_terms(eps, y, &mut vterm);
        let log_v = softmax_into(&vterm, &mut vresp);
        let arg = -eps * log_v - 0.5 * sq_norm(y);
        let val = plan.div2.conjugate(arg);
        let slope = plan.div2.conjugate_deriv(arg) / m;
        if !val.is_finite() || !slope.is_finite() {
            return Err(Error::NonFiniteObjective { term: "target", index: idx });
        }
        target += val;
        for k in 0..kc {
            let w = vresp[k] * slope;
            gv[k] -= eps * w;
            for i in 0..d {
                let diff = y[i] - v.means()[[k, i]];
                gv[mean_at(kc, k, i)] -= w * diff / s_v[[k, i]];
                gv[cov_at(kc, k, i)] -= eps * w * (-0.5 + diff * diff / (2.0 * eps * s_v[[k, i]]));
            }
        }
    }

    let mut mass = 0.0;
    for l in 0..lc {
        let beta = u.log_weights()[l].exp();
        mass += beta;
        gu[l] += eps * beta;
    }

    let value = source / n + target / m + eps * mass;
    Ok((value, grad))
}

/// Adam with bias correction on a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Applies one update in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != params.len() || grad.len() != self.m.len() {
            return Err(Error::InvalidLength { expected: self.m.len(), got: grad.len() });
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { what: "gradient", index });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Plan plus optimizer state. The optimizer works on coordinates
/// `z = params / scale` (element-wise) so that log-weights can be stepped in
/// `epsilon`-scaled units.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub plan: PlanModel,
    pub adam: Adam,
    scale: Vec<f64>,
}

impl TrainState {
    pub fn new(plan: PlanModel, config: &SolverConfig) -> Self {
        let d = plan.dim();
        let mut scale = vec![1.0; pack_plan(&plan).len()];
        if config.scale_log_weights {
            let kc = plan.v.n_components();
            let nv = GaussianMixture::packed_len(kc, d);
            let w = 1.0 / plan.epsilon();
            scale[..kc].iter_mut().for_each(|s| *s = w);
            scale[nv..nv + plan.u.n_components()].iter_mut().for_each(|s| *s = w);
        }
        let adam = Adam::new(scale.len(), config.adam_beta1, config.adam_beta2, config.adam_eps);
        Self { plan, adam, scale }
    }

    pub fn step(&self) -> u64 {
        self.adam.t
    }

    /// One Adam step on the gradient over packed parameters. Returns the new
    /// state and leaves `self` untouched.
    pub fn adam_step(&self, grad: &[f64], lr: f64) -> Result<TrainState> {
        let params = pack_plan(&self.plan);
        if grad.len() != params.len() {
            return Err(Error::InvalidLength { expected: params.len(), got: grad.len() });
        }
        let mut coords: Vec<f64> = params.iter().zip(&self.scale).map(|(p, s)| p / s).collect();
        let coord_grad: Vec<f64> = grad.iter().zip(&self.scale).map(|(g, s)| g * s).collect();
        let mut adam = self.adam.clone();
        adam.update(&mut coords, &coord_grad, lr)?;
        let params: Vec<f64> = coords.iter().zip(&self.scale).map(|(z, s)| z * s).collect();
        Ok(TrainState { plan: unpack_plan(&params, &self.plan)?, adam, scale: self.scale.clone() })
    }
}

/// Receives the objective value of every training step.
pub trait Progress {
    fn record(&mut self, step: usize, objective: f64) -> Result<()>;
}

impl Progress for Vec<f64> {
    fn record(&mut self, _step: usize, objective: f64) -> Result<()> {
        self.push(objective);
        Ok(())
    }
}

/// Writes `step,objective` lines (no header).
pub struct CsvProgress<W: Write> {
    out: W,
    path: std::path::PathBuf,
}

impl<W: Write> CsvProgress<W> {
    pub fn new(out: W, path: impl Into<std::path::PathBuf>) -> Self {
        Self { out, path: path.into() }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> Progress for CsvProgress<W> {
    fn record(&mut self, step: usize, objective: f64) -> Result<()> {
        writeln!(self.out, "{step},{objective}")
            .map_err(|source| Error::Io { path: self.path.clone(), source })
    }
}

fn pick_rows(rng: &mut ChaCha8Rng, data: &Array2<f64>, count: usize) -> Array2<f64> {
    let n = data.nrows();
    let idx: Vec<usize> = if n >= count {
        sample_indices(rng, n, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..n)).collect()
    };
    data.select(ndarray::Axis(0), &idx)
}

/// Data-anchored initialization: uniform log-weights `log(1/C)`, means drawn
/// without replacement from the data (targets for `v`, sources for `u`) and
/// unit pre-epsilon covariances.
pub fn initial_plan(
    config: &SolverConfig,
    samples_x: &Array2<f64>,
    samples_y: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<PlanModel> {
    let d = samples_x.ncols();
    let mk = |c: usize, means: Array2<f64>| {
        GaussianMixture::new(
            Array1::from_elem(c, -(c as f64).ln()),
            means,
            Array2::zeros((c, d)),
        )
    };
    let v = mk(config.k, pick_rows(rng, samples_y, config.k))?;
    let u = mk(config.l, pick_rows(rng, samples_x, config.l))?;
    PlanModel::new(config.epsilon, v, u, config.div1, config.div2)
}

fn check_dataset(data: &Array2<f64>, what: &'static str) -> Result<()> {
    if data.nrows() == 0 || data.ncols() == 0 {
        return Err(Error::InvalidArgument(format!("{what} dataset is empty")));
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what, index });
    }
    Ok(())
}

/// Minibatch Adam on the empirical objective. Batches are drawn with
/// replacement, independently at each step, from a generator seeded with
/// `config.seed`.
pub fn train(
    config: &SolverConfig,
    samples_x: &Array2<f64>,
    samples_y: &Array2<f64>,
    init: Option<PlanModel>,
    mut progress: Option<&mut dyn Progress>,
) -> Result<PlanModel> {
    config.validate()?;
    check_dataset(samples_x, "source")?;
    check_dataset(samples_y, "target")?;
    if samples_x.ncols() != samples_y.ncols() {
        return Err(Error::DimensionMismatch { expected: samples_x.ncols(), got: samples_y.ncols() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let plan = match init {
        Some(p) => {
            if p.dim() != samples_x.ncols() {
                return Err(Error::DimensionMismatch { expected: p.dim(), got: samples_x.ncols() });
            }
            p
        }
        None => initial_plan(config, samples_x, samples_y, &mut rng)?,
    };
    let mut state = TrainState::new(plan, config);
    let (nx, ny) = (samples_x.nrows(), samples_y.nrows());
    let b = config.batch_size;
    let mut idx_x = vec![0usize; b];
    let mut idx_y = vec![0usize; b];
    for step in 0..config.steps {
        idx_x.iter_mut().for_each(|i| *i = rng.random_range(0..nx));
        idx_y.iter_mut().for_each(|i| *i = rng.random_range(0..ny));
        let bx = samples_x.select(ndarray::Axis(0), &idx_x);
        let by = samples_y.select(ndarray::Axis(0), &idx_y);
        let wrap = |e: Error| Error::Training { step, source: Box::new(e) };
        let (value, grad) = objective_and_grad(&state.plan, &bx, &by).map_err(wrap)?;
        if let Some(p) = progress.as_deref_mut() {
            p.record(step, value)?;
        }
        state = state.adam_step(&grad, config.learning_rate).map_err(wrap)?;
    }
    Ok(state.plan)
}

/// Log-density values, convenient for logging a plan's fit.
pub fn mean_log_density(mix: &GaussianMixture, epsilon: f64, data: &Array2<f64>) -> Result<f64> {
    let mut terms = vec![0.0; mix.n_components()];
    let mut total = 0.0;
    for x in data.rows() {
        let x = x.as_slice().expect("standard layout");
        mix.check_point(x)?;
        mix.component_log_terms(epsilon, x, &mut terms);
        total += log_sum_exp(&terms);
    }
    Ok(total / data.nrows() as f64)
}
