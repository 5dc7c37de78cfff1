//! Reference computations used to validate the solver: midpoint quadrature,
//! discrete (unbalanced) Sinkhorn on grids, primal/dual evaluation of the
//! discretized transport problem and exact assignment-based W2.
//!
//! Everything here works on low-dimensional grids (d <= 2). A grid node
//! carries the cell volume as its quadrature weight, so the discrete problems
//! are exact discretizations of the continuous ones: masses are
//! `density * volume` and the entropy includes the `+ total mass` term.

use ndarray::Array2;

use crate::divergence::{DivergenceKind, DivergenceSpec};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, sq_norm};
use crate::plan::PlanModel;

/// Tensor-product midpoint grid in one or two dimensions.
#[derive(Debug, Clone)]
pub struct Grid {
    axes: Vec<(f64, f64)>,
    points_per_axis: usize,
    nodes: Array2<f64>,
}

impl Grid {
    pub const MIN_POINTS: usize = 16;

    pub fn new(axes: &[(f64, f64)], points_per_axis: usize) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "grids support 1 or 2 dimensions, got {}",
                axes.len()
            )));
        }
        if points_per_axis < Self::MIN_POINTS {
            return Err(Error::InvalidArgument(format!(
                "need at least {} points per axis, got {points_per_axis}",
                Self::MIN_POINTS
            )));
        }
        for &(lo, hi) in axes {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!("invalid axis bounds [{lo}, {hi}]")));
            }
        }
        let d = axes.len();
        let n = points_per_axis;
        let coords: Vec<Vec<f64>> = axes
            .iter()
            .map(|&(lo, hi)| {
                let h = (hi - lo) / n as f64;
                (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect()
            })
            .collect();
        let total = n.pow(d as u32);
        let mut nodes = Array2::zeros((total, d));
        for idx in 0..total {
            let mut rem = idx;
            for axis in (0..d).rev() {
                nodes[[idx, axis]] = coords[axis][rem % n];
                rem /= n;
            }
        }
        Ok(Self { axes: axes.to_vec(), points_per_axis: n, nodes })
    }

    pub fn line(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(&[(lo, hi)], n)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    pub fn axes(&self) -> &[(f64, f64)] {
        &self.axes
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes
            .iter()
            .map(|(lo, hi)| (hi - lo) / self.points_per_axis as f64)
            .product()
    }

    pub fn node_matrix(&self) -> &Array2<f64> {
        &self.nodes
    }

    pub fn nodes(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        self.nodes.rows().into_iter().map(|r| r.to_vec())
    }

    /// Indices of nodes lying in the outermost layer of cells.
    pub fn boundary_indices(&self) -> Vec<usize> {
        let n = self.points_per_axis;
        let d = self.dim();
        (0..self.len())
            .filter(|&idx| {
                let mut rem = idx;
                (0..d).any(|_| {
                    let i = rem % n;
                    rem /= n;
                    i == 0 || i == n - 1
                })
            })
            .collect()
    }

    /// Evaluates `f` at every node.
    pub fn evaluate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> Vec<f64> {
        self.nodes.rows().into_iter().map(|r| f(r.as_slice().expect("standard layout"))).collect()
    }
}

/// Midpoint-rule integral of `f` over `grid`. The error is `O(h^2)` for
/// smooth integrands (and much smaller for Gaussians resolved by the grid).
pub fn quadrature<F: FnMut(&[f64]) -> f64>(mut f: F, grid: &Grid) -> Result<f64> {
    let mut sum = 0.0;
    for (index, row) in grid.nodes.rows().into_iter().enumerate() {
        let v = f(row.as_slice().expect("standard layout"));
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "quadrature integrand", index });
        }
        sum += v;
    }
    Ok(sum * grid.cell_volume())
}

/// Nonnegative masses `G[i, j]` on the nodes of an `(x, y)` grid pair.
#[derive(Debug, Clone)]
pub struct DiscretePlan {
    pub mass: Array2<f64>,
    pub x_nodes: Array2<f64>,
    pub y_nodes: Array2<f64>,
}

impl DiscretePlan {
    pub fn total_mass(&self) -> f64 {
        self.mass.sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.mass.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.mass.columns().into_iter().map(|c| c.sum()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    /// `epsilon * KL(gamma* || gamma)`.
    pub eps_kl: f64,
    /// `L(plan) - L*`.
    pub gap: f64,
    pub l_plan: f64,
    pub l_star: f64,
}

impl BoundTerms {
    pub fn holds(&self, slack: f64) -> bool {
        self.eps_kl <= self.gap + slack
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub plan: DiscretePlan,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub iterations: usize,
    /// Sup-norm change of the log-scalings `phi / epsilon`, `psi / epsilon`
    /// after each iteration.
    pub residuals: Vec<f64>,
}

/// A discretized transport problem between grid densities `p` and `q`.
#[derive(Debug, Clone)]
pub struct GridProblem {
    pub x_grid: Grid,
    pub y_grid: Grid,
    /// Density of the source measure at the x-grid nodes.
    pub p: Vec<f64>,
    /// Density of the target measure at the y-grid nodes.
    pub q: Vec<f64>,
    pub epsilon: f64,
    pub div1: DivergenceSpec,
    pub div2: DivergenceSpec,
    cost: Array2<f64>,
}

const COVERAGE_TOL: f64 = 1e-12;

impl GridProblem {
    pub fn new(
        x_grid: Grid,
        y_grid: Grid,
        p: Vec<f64>,
        q: Vec<f64>,
        epsilon: f64,
        div1: DivergenceSpec,
        div2: DivergenceSpec,
    ) -> Result<Self> {
        if x_grid.dim() != y_grid.dim() {
            return Err(Error::DimensionMismatch { expected: x_grid.dim(), got: y_grid.dim() });
        }
        if p.len() != x_grid.len() {
            return Err(Error::DimensionMismatch { expected: x_grid.len(), got: p.len() });
        }
        if q.len() != y_grid.len() {
            return Err(Error::DimensionMismatch { expected: y_grid.len(), got: q.len() });
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        for (what, dens) in [("p", &p), ("q", &q)] {
            if let Some(index) = dens.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::NonFinite { what: if what == "p" { "p density" } else { "q density" }, index });
            }
        }
        check_coverage("source density", &x_grid, &p)?;
        check_coverage("target density", &y_grid, &q)?;
        let cost = pairwise_half_sq_dist(x_grid.node_matrix(), y_grid.node_matrix());
        Ok(Self { x_grid, y_grid, p, q, epsilon, div1, div2, cost })
    }

    /// Convenience constructor evaluating `p` and `q` at the grid nodes.
    pub fn from_densities<P, Q>(
        x_grid: Grid,
        y_grid: Grid,
        p: P,
        q: Q,
        epsilon: f64,
        div1: DivergenceSpec,
        div2: DivergenceSpec,
    ) -> Result<Self>
    where
        P: FnMut(&[f64]) -> f64,
        Q: FnMut(&[f64]) -> f64,
    {
        let pv = x_grid.evaluate(p);
        let qv = y_grid.evaluate(q);
        Self::new(x_grid, y_grid, pv, qv, epsilon, div1, div2)
    }

    pub fn cost(&self) -> &Array2<f64> {
        &self.cost
    }

    fn log_kernel_entry(&self, phi: f64, psi: f64, i: usize, j: usize) -> f64 {
        (phi + psi - self.cost[[i, j]]) / self.epsilon
    }

    /// Plan masses induced by potentials: `w_x w_y exp{(phi_i + psi_j - c_ij) / eps}`.
    pub fn plan_from_potentials(&self, phi: &[f64], psi: &[f64]) -> DiscretePlan {
        let w = self.x_grid.cell_volume() * self.y_grid.cell_volume();
        let mass = Array2::from_shape_fn(self.cost.dim(), |(i, j)| {
            w * self.log_kernel_entry(phi[i], psi[j], i, j).exp()
        });
        DiscretePlan {
            mass,
            x_nodes: self.x_grid.node_matrix().clone(),
            y_nodes: self.y_grid.node_matrix().clone(),
        }
    }

    fn damping(&self, div: &DivergenceSpec) -> Result<f64> {
        match div.kind {
            DivergenceKind::ScaledKl => Ok(div.tau / (div.tau + self.epsilon)),
            DivergenceKind::Balanced => Ok(1.0),
            DivergenceKind::ScaledChi2 => Err(Error::InvalidArgument(
                "grid Sinkhorn supports the scaled KL and balanced kinds only".into(),
            )),
        }
    }

    /// Log-domain unbalanced Sinkhorn. Each half-step solves the first-order
    /// condition of the dual in one potential exactly; for the scaled KL kind
    /// this is the usual update with exponent `tau / (tau + epsilon)`.
    pub fn sinkhorn(&self, max_iter: usize, tol: f64) -> Result<SinkhornSolution> {
        let kx = self.damping(&self.div1)?;
        let ky = self.damping(&self.div2)?;
        let eps = self.epsilon;
        let (nx, ny) = self.cost.dim();
        let log_wx = self.x_grid.cell_volume().ln();
        let log_wy = self.y_grid.cell_volume().ln();
        let log_p: Vec<f64> = self.p.iter().map(|v| v.ln()).collect();
        let log_q: Vec<f64> = self.q.iter().map(|v| v.ln()).collect();
        let mut phi = vec![0.0; nx];
        let mut psi = vec![0.0; ny];
        let mut buf_y = vec![0.0; ny];
        let mut buf_x = vec![0.0; nx];
        let mut residuals = Vec::new();
        let mut residual = f64::INFINITY;
        for it in 0..max_iter {
            let mut change: f64 = 0.0;
            for i in 0..nx {
                let new = if log_p[i] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    for j in 0..ny {
                        buf_y[j] = (psi[j] - self.cost[[i, j]]) / eps + log_wy;
                    }
                    eps * kx * (log_p[i] - log_sum_exp(&buf_y))
                };
                change = change.max(scaled_change(phi[i], new, eps));
                phi[i] = new;
            }
            for j in 0..ny {
                let new = if log_q[j] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    for i in 0..nx {
                        buf_x[i] = (phi[i] - self.cost[[i, j]]) / eps + log_wx;
                    }
                    eps * ky * (log_q[j] - log_sum_exp(&buf_x))
                };
                change = change.max(scaled_change(psi[j], new, eps));
                psi[j] = new;
            }
            residual = change;
            residuals.push(change);
            if change < tol {
                return Ok(SinkhornSolution {
                    plan: self.plan_from_potentials(&phi, &psi),
                    phi,
                    psi,
                    iterations: it + 1,
                    residuals,
                });
            }
        }
        Err(Error::NotConverged { iterations: max_iter, residual })
    }

    /// Primal objective: transport cost minus `epsilon` times the entropy of
    /// positive measures plus both marginal divergences.
    pub fn primal_value(&self, plan: &DiscretePlan) -> f64 {
        let wx = self.x_grid.cell_volume();
        let wy = self.y_grid.cell_volume();
        let w = wx * wy;
        let mut transport = 0.0;
        let mut neg_entropy = 0.0;
        for ((i, j), &g) in plan.mass.indexed_iter() {
            transport += self.cost[[i, j]] * g;
            if g > 0.0 {
                neg_entropy += g * (g / w).ln() - g;
            }
        }
        let rows = plan.row_sums();
        let cols = plan.col_sums();
        let d1 = marginal_divergence(&self.div1, &rows, &self.p, wx);
        let d2 = marginal_divergence(&self.div2, &cols, &self.q, wy);
        transport + self.epsilon * neg_entropy + d1 + d2
    }

    /// Dual objective `-eps sum exp{(phi + psi - c)/eps} - sum f1(-phi) p - sum f2(-psi) q`
    /// (to be maximized).
    pub fn dual_objective(&self, phi: &[f64], psi: &[f64]) -> f64 {
        let wx = self.x_grid.cell_volume();
        let wy = self.y_grid.cell_volume();
        let mut mass = 0.0;
        for i in 0..phi.len() {
            for j in 0..psi.len() {
                mass += self.log_kernel_entry(phi[i], psi[j], i, j).exp();
            }
        }
        mass *= wx * wy;
        let t1: f64 = phi
            .iter()
            .zip(&self.p)
            .filter(|(_, p)| **p > 0.0)
            .map(|(f, p)| self.div1.conjugate(-f) * p)
            .sum::<f64>()
            * wx;
        let t2: f64 = psi
            .iter()
            .zip(&self.q)
            .filter(|(_, q)| **q > 0.0)
            .map(|(g, q)| self.div2.conjugate(-g) * q)
            .sum::<f64>()
            * wy;
        -self.epsilon * mass - t1 - t2
    }

    /// Loss-convention dual value: the negative of [`dual_objective`](Self::dual_objective).
    /// At the optimal potentials this is `L*`; at the potentials of a
    /// parametrized plan it is the population objective of that plan.
    pub fn dual_value(&self, phi: &[f64], psi: &[f64]) -> f64 {
        -self.dual_objective(phi, psi)
    }

    /// Potentials of a parametrized plan evaluated at the grid nodes.
    pub fn plan_potentials(&self, plan: &PlanModel) -> Result<(Vec<f64>, Vec<f64>)> {
        let phi = self
            .x_grid
            .nodes()
            .map(|x| plan.phi(&x))
            .collect::<Result<Vec<_>>>()?;
        let psi = self
            .y_grid
            .nodes()
            .map(|y| plan.psi(&y))
            .collect::<Result<Vec<_>>>()?;
        Ok((phi, psi))
    }

    /// `L(theta, omega)` of a parametrized plan by quadrature on this grid pair.
    pub fn plan_dual_value(&self, plan: &PlanModel) -> Result<f64> {
        if plan.dim() != self.x_grid.dim() {
            return Err(Error::DimensionMismatch { expected: self.x_grid.dim(), got: plan.dim() });
        }
        let (phi, psi) = self.plan_potentials(plan)?;
        let v = self.dual_value(&phi, &psi);
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "grid dual value", index: 0 });
        }
        Ok(v)
    }

    /// `KL(reference || plan)` for positive measures on the grid, with the
    /// parametrized plan discretized on the same nodes.
    pub fn kl_to_plan(&self, reference: &DiscretePlan, plan: &PlanModel) -> Result<f64> {
        let w = self.x_grid.cell_volume() * self.y_grid.cell_volume();
        let xs: Vec<Vec<f64>> = self.x_grid.nodes().collect();
        let ys: Vec<Vec<f64>> = self.y_grid.nodes().collect();
        let mut kl = 0.0;
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                let g = reference.mass[[i, j]];
                let log_model = plan.log_joint(x, y)? + w.ln();
                let model = log_model.exp();
                kl += model - g;
                if g > 0.0 {
                    kl += g * (g.ln() - log_model);
                }
            }
        }
        Ok(kl)
    }

    /// Both sides of the bound `eps KL(gamma* || gamma) <= L(plan) - L*`,
    /// with `gamma*` and `L*` taken from a converged Sinkhorn solution.
    pub fn bound_terms(&self, optimum: &SinkhornSolution, plan: &PlanModel) -> Result<BoundTerms> {
        let l_star = self.dual_value(&optimum.phi, &optimum.psi);
        let l_plan = self.plan_dual_value(plan)?;
        let eps_kl = self.epsilon * self.kl_to_plan(&optimum.plan, plan)?;
        Ok(BoundTerms { eps_kl, gap: l_plan - l_star, l_plan, l_star })
    }

    /// Minimizes the discretized primal directly over the plan entries with a
    /// damped Newton method in log-coordinates. Independent of the dual, so
    /// it cross-checks [`sinkhorn`](Self::sinkhorn) and covers the chi-square
    /// kind. Intended for small grids: the Hessian is dense.
    pub fn primal_descent(&self, max_iter: usize, tol: f64) -> Result<DiscretePlan> {
        for div in [&self.div1, &self.div2] {
            if div.kind == DivergenceKind::Balanced {
                return Err(Error::InvalidArgument(
                    "direct primal descent needs unbalanced marginal penalties".into(),
                ));
            }
        }
        if let Some(index) = self.p.iter().chain(&self.q).position(|v| *v <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "direct primal descent needs positive densities (node {index})"
            )));
        }
        let (nx, ny) = self.cost.dim();
        let n = nx * ny;
        let wx = self.x_grid.cell_volume();
        let wy = self.y_grid.cell_volume();
        let eps = self.epsilon;
        let mut z: Vec<f64> = (0..n).map(|k| (wx * self.p[k / ny] * wy * self.q[k % ny]).ln()).collect();
        let to_plan = |z: &[f64]| DiscretePlan {
            mass: Array2::from_shape_fn((nx, ny), |(i, j)| z[i * ny + j].exp()),
            x_nodes: self.x_grid.node_matrix().clone(),
            y_nodes: self.y_grid.node_matrix().clone(),
        };
        let mut plan = to_plan(&z);
        let mut value = self.primal_value(&plan);
        let mut hess = vec![0.0; n * n];
        let mut decrement = f64::INFINITY;
        for _ in 0..max_iter {
            let rows = plan.row_sums();
            let cols = plan.col_sums();
            let ratio_x: Vec<f64> = rows.iter().zip(&self.p).map(|(r, p)| r / (wx * p)).collect();
            let ratio_y: Vec<f64> = cols.iter().zip(&self.q).map(|(c, q)| c / (wy * q)).collect();
            let curv_x: Vec<f64> = ratio_x
                .iter()
                .zip(&self.p)
                .map(|(r, p)| generator_curvature(&self.div1, *r) / (wx * p))
                .collect();
            let curv_y: Vec<f64> = ratio_y
                .iter()
                .zip(&self.q)
                .map(|(r, q)| generator_curvature(&self.div2, *r) / (wy * q))
                .collect();
            let g = &plan.mass;
            let mut grad = vec![0.0; n];
            for i in 0..nx {
                for j in 0..ny {
                    let dg = self.cost[[i, j]]
                        + eps * z[i * ny + j]
                        - eps * (wx * wy).ln()
                        + self.div1.generator_deriv(ratio_x[i])
                        + self.div2.generator_deriv(ratio_y[j]);
                    grad[i * ny + j] = g[[i, j]] * dg;
                }
            }
            // Hessian in z with the indefinite diagonal part made positive
            hess.iter_mut().for_each(|h| *h = 0.0);
            for a in 0..n {
                let (i, j) = (a / ny, a % ny);
                hess[a * n + a] = eps * g[[i, j]] + grad[a].abs();
                for j2 in 0..ny {
                    hess[a * n + i * ny + j2] += curv_x[i] * g[[i, j]] * g[[i, j2]];
                }
                for i2 in 0..nx {
                    hess[a * n + i2 * ny + j] += curv_y[j] * g[[i, j]] * g[[i2, j]];
                }
            }
            let max_diag = (0..n).map(|a| hess[a * n + a]).fold(0.0, f64::max);
            for a in 0..n {
                hess[a * n + a] += 1e-13 * max_diag;
            }
            let step = cholesky_solve(&mut hess, n, &grad)?;
            decrement = step.iter().zip(&grad).map(|(s, g)| s * g).sum();
            if decrement < tol {
                return Ok(plan);
            }
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = z.iter().zip(&step).map(|(z, s)| z - t * s).collect();
                let trial_plan = to_plan(&trial);
                let trial_value = self.primal_value(&trial_plan);
                if trial_value <= value - 0.25 * t * decrement {
                    z = trial;
                    plan = trial_plan;
                    value = trial_value;
                    break;
                }
                t *= 0.5;
                if t < 1e-12 {
                    // no further decrease is representable
                    return Ok(plan);
                }
            }
        }
        Err(Error::NotConverged { iterations: max_iter, residual: decrement })
    }
    /// Maximizes the discrete dual objective over `(phi, psi)` with a damped
    /// Newton method. Works for every unbalanced kind, including chi-square,
    /// and returns the maximizing potentials.
    pub fn dual_ascent(&self, max_iter: usize, tol: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        for div in [&self.div1, &self.div2] {
            if div.kind == DivergenceKind::Balanced {
                return Err(Error::InvalidArgument(
                    "dual ascent needs unbalanced marginal penalties".into(),
                ));
            }
        }
        let (nx, ny) = self.cost.dim();
        let n = nx + ny;
        let wx = self.x_grid.cell_volume();
        let wy = self.y_grid.cell_volume();
        let eps = self.epsilon;
        let mut pot = vec![0.0; n];
        let mut value = self.dual_objective(&pot[..nx], &pot[nx..]);
        let mut hess = vec![0.0; n * n];
        let mut decrement = f64::INFINITY;
        for _ in 0..max_iter {
            let plan = self.plan_from_potentials(&pot[..nx], &pot[nx..]);
            let rows = plan.row_sums();
            let cols = plan.col_sums();
            // gradient and Hessian of the negated (convex) dual
            let mut grad = vec![0.0; n];
            hess.iter_mut().for_each(|h| *h = 0.0);
            for i in 0..nx {
                let t = -pot[i];
                grad[i] = rows[i] - wx * self.p[i] * self.div1.conjugate_deriv(t);
                hess[i * n + i] = rows[i] / eps + wx * self.p[i] * conjugate_curvature(&self.div1, t);
            }
            for j in 0..ny {
                let t = -pot[nx + j];
                let a = nx + j;
                grad[a] = cols[j] - wy * self.q[j] * self.div2.conjugate_deriv(t);
                hess[a * n + a] = cols[j] / eps + wy * self.q[j] * conjugate_curvature(&self.div2, t);
            }
            for i in 0..nx {
                for j in 0..ny {
                    let h = plan.mass[[i, j]] / eps;
                    hess[i * n + nx + j] = h;
                    hess[(nx + j) * n + i] = h;
                }
            }
            let max_diag = (0..n).map(|a| hess[a * n + a]).fold(0.0, f64::max);
            for a in 0..n {
                hess[a * n + a] += 1e-13 * max_diag;
            }
            let step = cholesky_solve(&mut hess, n, &grad)?;
            decrement = step.iter().zip(&grad).map(|(s, g)| s * g).sum();
            if decrement < tol {
                return Ok((pot[..nx].to_vec(), pot[nx..].to_vec()));
            }
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = pot.iter().zip(&step).map(|(p, s)| p - t * s).collect();
                let trial_value = self.dual_objective(&trial[..nx], &trial[nx..]);
                if trial_value >= value + 0.25 * t * decrement {
                    pot = trial;
                    value = trial_value;
                    break;
                }
                t *= 0.5;
                if t < 1e-12 {
                    return Ok((pot[..nx].to_vec(), pot[nx..].to_vec()));
                }
            }
        }
        Err(Error::NotConverged { iterations: max_iter, residual: decrement })
    }
}

fn conjugate_curvature(div: &DivergenceSpec, t: f64) -> f64 {
    match div.kind {
        DivergenceKind::ScaledKl => (t / div.tau).exp() / div.tau,
        DivergenceKind::ScaledChi2 => {
            if t / div.tau < -2.0 {
                0.0
            } else {
                0.5 / div.tau
            }
        }
        DivergenceKind::Balanced => 0.0,
    }
}

fn generator_curvature(div: &DivergenceSpec, r: f64) -> f64 {
    match div.kind {
        DivergenceKind::ScaledKl => div.tau / r,
        DivergenceKind::ScaledChi2 => 2.0 * div.tau,
        DivergenceKind::Balanced => f64::NAN,
    }
}

/// Solves `H x = b` for a symmetric positive definite `H` stored row-major;
/// `H` is overwritten by its Cholesky factor.
fn cholesky_solve(h: &mut [f64], n: usize, b: &[f64]) -> Result<Vec<f64>> {
    for j in 0..n {
        let mut d = h[j * n + j];
        for k in 0..j {
            d -= h[j * n + k] * h[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::InvalidArgument("Newton system is not positive definite".into()));
        }
        let d = d.sqrt();
        h[j * n + j] = d;
        for i in j + 1..n {
            let mut s = h[i * n + j];
            for k in 0..j {
                s -= h[i * n + k] * h[j * n + k];
            }
            h[i * n + j] = s / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= h[i * n + k] * y[k];
        }
        y[i] /= h[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= h[k * n + i] * y[k];
        }
        y[i] /= h[i * n + i];
    }
    Ok(y)
}

fn scaled_change(old: f64, new: f64, eps: f64) -> f64 {
    if old == new {
        0.0
    } else {
        ((new - old) / eps).abs()
    }
}

fn check_coverage(what: &str, grid: &Grid, dens: &[f64]) -> Result<()> {
    let peak = dens.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::Coverage(format!("{what} vanishes on the whole grid")));
    }
    let edge = grid
        .boundary_indices()
        .into_iter()
        .map(|i| dens[i])
        .fold(0.0, f64::max);
    if edge > COVERAGE_TOL * peak.max(1.0) {
        return Err(Error::Coverage(format!(
            "{what} is {edge:e} on the grid boundary (peak {peak:e})"
        )));
    }
    Ok(())
}

/// `D_f(mu || nu)` for a marginal with masses `marginal` against a density
/// `reference` sampled on nodes of volume `w`.
fn marginal_divergence(div: &DivergenceSpec, marginal: &[f64], reference: &[f64], w: f64) -> f64 {
    marginal
        .iter()
        .zip(reference)
        .map(|(&m, &r)| {
            let dens = m / w;
            match div.kind {
                // the sinkhorn marginal only matches to solver tolerance
                DivergenceKind::Balanced => 0.0,
                _ if r == 0.0 => {
                    if dens == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                }
                _ => w * r * div.generator(dens / r),
            }
        })
        .sum()
}

/// Matrix of `|x_i - y_j|^2 / 2`.
pub fn pairwise_half_sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        let diff: Vec<f64> = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x - y).collect();
        0.5 * sq_norm(&diff)
    })
}

/// Optimal value of the linear assignment problem on a dense square cost
/// matrix, with the minimizing permutation (`assignment[row] = col`).
/// Shortest augmenting path (Hungarian) algorithm, `O(n^3)`.
pub fn solve_assignment(cost: &Array2<f64>) -> (f64, Vec<usize>) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    if n == 0 {
        return (0.0, Vec::new());
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            let row = cost.row(i0 - 1);
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    (total, assignment)
}

/// Largest sample count accepted by [`exact_w2`].
pub const MAX_W2_SAMPLES: usize = 2048;

/// Mean transport cost `|x - y|^2 / 2` of the optimal matching between two
/// equal-size point clouds.
pub fn optimal_matching_cost(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), got: b.nrows() });
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch { expected: a.ncols(), got: b.ncols() });
    }
    if a.nrows() == 0 {
        return Err(Error::InvalidArgument("empty sample sets".into()));
    }
    if a.nrows() > MAX_W2_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "exact W2 supports at most {MAX_W2_SAMPLES} samples, got {}",
            a.nrows()
        )));
    }
    let cost = pairwise_half_sq_dist(a, b);
    let (total, _) = solve_assignment(&cost);
    Ok((total / a.nrows() as f64).max(0.0))
}

/// Empirical 2-Wasserstein distance between equal-size samples,
/// `sqrt(min_pi mean |x_i - y_pi(i)|^2)`.
pub fn exact_w2(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    Ok((2.0 * optimal_matching_cost(a, b)?).sqrt())
}
