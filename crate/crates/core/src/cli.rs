//! Command-line front end: `ulight generate|train|sample|evaluate|oracle`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::divergence::{DivergenceKind, DivergenceSpec};
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::io::{
    column_names, load_checkpoint, read_dataset, save_checkpoint, write_dataset, write_json, write_table,
    Checkpoint,
};
use crate::metrics::{evaluate, EvalOptions};
use crate::oracle::{Grid, GridProblem};
use crate::plan::PlanModel;
use crate::scenario::Scenario;
use crate::solver::{objective, train, CsvProgress, SolverConfig};

#[derive(Debug, Parser)]
#[command(name = "ulight", version, about = "Light solver for unbalanced entropic optimal transport")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic scenario into `<out>/source.csv` and `<out>/target.csv`.
    Generate(GenerateArgs),
    /// Fit a plan to source and target samples and write a checkpoint.
    Train(TrainArgs),
    /// Draw from a checkpoint's conditional plan or its left marginal.
    Sample(SampleArgs),
    /// Compute transport metrics of a checkpoint and write them as JSON.
    Evaluate(EvaluateArgs),
    /// Run a grid reference computation and report pass/fail as JSON.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value = "gauss_mix")]
    pub scenario: Scenario,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DivArg {
    Kl,
    Chi2,
    Balanced,
}

impl From<DivArg> for DivergenceKind {
    fn from(d: DivArg) -> Self {
        match d {
            DivArg::Kl => DivergenceKind::ScaledKl,
            DivArg::Chi2 => DivergenceKind::ScaledChi2,
            DivArg::Balanced => DivergenceKind::Balanced,
        }
    }
}

/// Solver settings. Each flag overrides the config file, which overrides
/// the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct SolverFlags {
    /// JSON file with any subset of the solver settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Divergence kind applied to both marginals.
    #[arg(long, value_enum)]
    pub div: Option<DivArg>,
    #[arg(long)]
    pub tau1: Option<f64>,
    #[arg(long)]
    pub tau2: Option<f64>,
    #[arg(long)]
    pub components_k: Option<usize>,
    #[arg(long)]
    pub components_l: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SolverFlags {
    pub fn resolve(&self) -> Result<SolverConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|source| Error::Io { path: path.clone(), source })?;
                serde_json::from_str::<SolverConfig>(&text)
                    .map_err(|e| Error::Parse { path: path.clone(), message: e.to_string() })?
            }
            None => SolverConfig::default(),
        };
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(kind) = self.div {
            cfg.div1.kind = kind.into();
            cfg.div2.kind = kind.into();
        }
        if let Some(t) = self.tau1 {
            cfg.div1.tau = t;
        }
        if let Some(t) = self.tau2 {
            cfg.div2.tau = t;
        }
        if let Some(v) = self.components_k {
            cfg.k = v;
        }
        if let Some(v) = self.components_l {
            cfg.l = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step `step,objective` lines; defaults to `<out>.progress.csv`.
    #[arg(long)]
    pub progress: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Draw one target per row of this file.
    #[arg(long, conflicts_with = "marginal", required_unless_present = "marginal")]
    pub source: Option<PathBuf>,
    /// Draw from the normalized left marginal instead.
    #[arg(long)]
    pub marginal: bool,
    /// Number of marginal draws.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Scenario whose mode centers label the transport matrix.
    #[arg(long, default_value = "gauss_mix")]
    pub scenario: Scenario,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub draws_per_x: usize,
    #[arg(long, default_value_t = 1024)]
    pub w2_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleTask {
    Sinkhorn,
    DualityGap,
    BoundCheck,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(value_enum)]
    pub task: OracleTask,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value = "kl")]
    pub div: DivArg,
    #[arg(long, default_value_t = 1.0)]
    pub tau1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau2: f64,
    /// Grid nodes; defaults to 256 (24 for the chi-square kind, whose
    /// reference solver is dense).
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long, default_value_t = 100_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    /// Random plans tested by `bound-check`.
    #[arg(long, default_value_t = 50)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; the report is printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::Oracle(a) => {
            if cmd_oracle(&a)?.pass() {
                Ok(())
            } else {
                Err(Error::CheckFailed(format!("oracle {:?} did not meet its tolerance", a.task)))
            }
        }
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    if args.n == 0 {
        return Err(Error::InvalidArgument("--n must be positive".into()));
    }
    std::fs::create_dir_all(&args.out).map_err(|source| Error::Io { path: args.out.clone(), source })?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let xs = args.scenario.sample_source(&mut rng, args.n);
    let ys = args.scenario.sample_target(&mut rng, args.n);
    write_dataset(&args.out.join("source.csv"), &xs)?;
    write_dataset(&args.out.join("target.csv"), &ys)?;
    Ok(())
}

fn default_progress_path(out: &Path) -> PathBuf {
    out.with_extension("progress.csv")
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.solver.resolve()?;
    let xs = read_dataset(&args.source)?;
    let ys = read_dataset(&args.target)?;
    let progress_path = args.progress.clone().unwrap_or_else(|| default_progress_path(&args.out));
    let file = File::create(&progress_path).map_err(|source| Error::Io { path: progress_path.clone(), source })?;
    let mut sink = CsvProgress::new(BufWriter::new(file), &progress_path);
    let start = Instant::now();
    let plan = train(&cfg, &xs, &ys, None, Some(&mut sink))?;
    let elapsed = start.elapsed().as_secs_f64();
    std::io::Write::flush(&mut sink.into_inner())
        .map_err(|source| Error::Io { path: progress_path.clone(), source })?;
    save_checkpoint(&args.out, &Checkpoint::from_plan(&plan, cfg.seed, cfg.steps as u64))?;
    let final_objective = objective(&plan, &xs, &ys)?;
    println!("final_objective={final_objective}");
    println!("learned_mass={}", plan.u.total_mass());
    println!("elapsed_seconds={elapsed:.3}");
    Ok(())
}

fn check_dim(plan: &PlanModel, data: &Array2<f64>) -> Result<()> {
    if data.ncols() != plan.dim() {
        return Err(Error::DimensionMismatch { expected: plan.dim(), got: data.ncols() });
    }
    Ok(())
}

pub fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let (_, plan) = load_checkpoint(&args.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let d = plan.dim();
    match &args.source {
        Some(path) => {
            let xs = read_dataset(path)?;
            check_dim(&plan, &xs)?;
            let ys = crate::metrics::generate(&plan, &xs, &mut rng)?;
            let mut header = column_names("x", d);
            header.extend(column_names("y", d));
            write_table(&args.out, &header, &concatenate![Axis(1), xs, ys])
        }
        None => {
            if args.n == 0 {
                return Err(Error::InvalidArgument("--n must be positive".into()));
            }
            let draws = plan.u.sample(plan.epsilon(), &mut rng, args.n);
            write_dataset(&args.out, &draws)?;
            println!("learned_mass={}", plan.u.total_mass());
            Ok(())
        }
    }
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<crate::metrics::MetricReport> {
    let start = Instant::now();
    let (_, plan) = load_checkpoint(&args.checkpoint)?;
    let xs = read_dataset(&args.source)?;
    let ys = read_dataset(&args.target)?;
    check_dim(&plan, &xs)?;
    check_dim(&plan, &ys)?;
    let mut options = EvalOptions::new(args.scenario.source_centers(), args.scenario.target_centers());
    options.draws_per_x = args.draws_per_x;
    options.w2_samples = args.w2_samples;
    if options.centers_src.ncols() != plan.dim() {
        return Err(Error::InvalidArgument(format!(
            "scenario `{}` mode centers are {}-dimensional, the checkpoint is {}-dimensional",
            args.scenario,
            options.centers_src.ncols(),
            plan.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut report = evaluate(&plan, &xs, &ys, &options, &mut rng)?;
    report.elapsed_seconds = Some(start.elapsed().as_secs_f64());
    write_json(&args.out, &report)?;
    Ok(report)
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Fixed one-dimensional pair of bimodal densities used by the oracle runs.
pub fn oracle_problem(epsilon: f64, div1: DivergenceSpec, div2: DivergenceSpec, points: usize) -> Result<GridProblem> {
    let grid = Grid::line(-6.0, 6.0, points)?;
    GridProblem::from_densities(
        grid.clone(),
        grid,
        |x| 0.3 * normal_pdf(x[0], -2.0, 0.2) + 0.7 * normal_pdf(x[0], 1.0, 0.3),
        |y| 0.6 * normal_pdf(y[0], -1.0, 0.3) + 0.4 * normal_pdf(y[0], 2.0, 0.2),
        epsilon,
        div1,
        div2,
    )
}

/// Random one-dimensional plan with three components per mixture.
pub fn random_plan<R: Rng + ?Sized>(rng: &mut R, epsilon: f64, div1: DivergenceSpec, div2: DivergenceSpec) -> Result<PlanModel> {
    let mix = |rng: &mut R| {
        GaussianMixture::new(
            (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            Array2::from_shape_fn((3, 1), |_| rng.random_range(-2.0..2.0)),
            Array2::from_shape_fn((3, 1), |_| rng.random_range(-1.0..0.5)),
        )
    };
    let v = mix(rng)?;
    let u = mix(rng)?;
    PlanModel::new(epsilon, v, u, div1, div2)
}

pub const DUALITY_GAP_TOL: f64 = 1e-4;
pub const BOUND_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct SinkhornReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub tol: f64,
    pub total_mass: f64,
    /// Largest absolute deviation of the plan marginals from the grid masses
    /// of `p` and `q`.
    pub marginal_residual: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub draws: usize,
    pub satisfied: usize,
    pub l_star: f64,
    /// Smallest `L - L* - eps KL` over the draws.
    pub min_margin: f64,
    pub slack: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum OracleReport {
    Sinkhorn(SinkhornReport),
    DualityGap(DualityReport),
    BoundCheck(BoundReport),
}

impl OracleReport {
    pub fn pass(&self) -> bool {
        match self {
            OracleReport::Sinkhorn(r) => r.pass,
            OracleReport::DualityGap(r) => r.pass,
            OracleReport::BoundCheck(r) => r.pass,
        }
    }
}

pub fn cmd_oracle(args: &OracleArgs) -> Result<OracleReport> {
    let kind: DivergenceKind = args.div.into();
    let div1 = DivergenceSpec::new(kind, if kind == DivergenceKind::Balanced { 1.0 } else { args.tau1 })?;
    let div2 = DivergenceSpec::new(kind, if kind == DivergenceKind::Balanced { 1.0 } else { args.tau2 })?;
    let points = args.points.unwrap_or(if kind == DivergenceKind::ScaledChi2 { 24 } else { 256 });
    let prob = oracle_problem(args.epsilon, div1, div2, points)?;
    let report = match args.task {
        OracleTask::Sinkhorn => {
            let sol = prob.sinkhorn(args.max_iter, args.tol)?;
            let w = prob.x_grid.cell_volume();
            let rows = sol.plan.row_sums();
            let cols = sol.plan.col_sums();
            let dev = |m: &[f64], d: &[f64]| m.iter().zip(d).map(|(a, b)| (a - b * w).abs()).fold(0.0, f64::max);
            let marginal_residual = dev(&rows, &prob.p).max(dev(&cols, &prob.q));
            let final_residual = *sol.residuals.last().unwrap_or(&0.0);
            let pass = final_residual < args.tol && (kind != DivergenceKind::Balanced || marginal_residual <= args.tol);
            OracleReport::Sinkhorn(SinkhornReport {
                iterations: sol.iterations,
                final_residual,
                tol: args.tol,
                total_mass: sol.plan.total_mass(),
                marginal_residual,
                pass,
            })
        }
        OracleTask::DualityGap => {
            let (primal, dual) = if kind == DivergenceKind::ScaledChi2 {
                let plan = prob.primal_descent(200, 1e-13)?;
                let (phi, psi) = prob.dual_ascent(200, 1e-13)?;
                (prob.primal_value(&plan), prob.dual_objective(&phi, &psi))
            } else {
                let sol = prob.sinkhorn(args.max_iter, args.tol)?;
                (prob.primal_value(&sol.plan), prob.dual_objective(&sol.phi, &sol.psi))
            };
            let gap = (primal - dual).abs();
            OracleReport::DualityGap(DualityReport { primal, dual, gap, tolerance: DUALITY_GAP_TOL, pass: gap <= DUALITY_GAP_TOL })
        }
        OracleTask::BoundCheck => {
            let sol = prob.sinkhorn(args.max_iter, args.tol)?;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let mut satisfied = 0;
            let mut min_margin = f64::INFINITY;
            let mut l_star = f64::NAN;
            for _ in 0..args.draws {
                let plan = random_plan(&mut rng, args.epsilon, div1, div2)?;
                let terms = prob.bound_terms(&sol, &plan)?;
                l_star = terms.l_star;
                min_margin = min_margin.min(terms.gap - terms.eps_kl);
                if terms.holds(BOUND_SLACK) {
                    satisfied += 1;
                }
            }
            OracleReport::BoundCheck(BoundReport {
                draws: args.draws,
                satisfied,
                l_star,
                min_margin,
                slack: BOUND_SLACK,
                pass: satisfied == args.draws,
            })
        }
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    Ok(report)
}
