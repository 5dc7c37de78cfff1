//! End-to-end runs of the `ulight` binary.

use std::path::Path;
use std::process::{Command, Output};

use ndarray::{array, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ulight::io::{load_checkpoint, read_dataset, save_checkpoint, write_dataset, Checkpoint};
use ulight::solver::initial_plan;
use ulight::{DivergenceSpec, GaussianMixture, PlanModel, SolverConfig};

fn ulight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ulight")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ulight(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, n: usize, seed: u64) {
    ok(&["generate", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", s(dir)]);
}

#[test]
fn generate_writes_headed_csvs_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    generate(a.path(), 1, 9);
    generate(b.path(), 1, 9);
    generate(c.path(), 1, 10);
    for name in ["source.csv", "target.csv"] {
        let text = std::fs::read_to_string(a.path().join(name)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2, "{text}");
        assert_eq!(lines[0], "x0,x1");
        assert_eq!(read_dataset(&a.path().join(name)).unwrap().dim(), (1, 2));
        assert_eq!(text, std::fs::read_to_string(b.path().join(name)).unwrap());
        assert_ne!(text, std::fs::read_to_string(c.path().join(name)).unwrap());
    }
}

#[test]
fn zero_step_training_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), 50, 1);
    let ckpt = dir.path().join("c.json");
    let stdout = ok(&[
        "train",
        "--source",
        s(&dir.path().join("source.csv")),
        "--target",
        s(&dir.path().join("target.csv")),
        "--out",
        s(&ckpt),
        "--steps",
        "0",
        "--seed",
        "4",
        "--div",
        "chi2",
        "--tau1",
        "3",
    ]);
    assert!(stdout.contains("final_objective="));
    assert!(stdout.contains("learned_mass="));
    let (meta, plan) = load_checkpoint(&ckpt).unwrap();
    assert_eq!((meta.seed, meta.steps_trained), (4, 0));

    let cfg = SolverConfig { seed: 4, div1: DivergenceSpec::chi2(3.0), div2: DivergenceSpec::chi2(1.0), ..Default::default() };
    let xs = read_dataset(&dir.path().join("source.csv")).unwrap();
    let ys = read_dataset(&dir.path().join("target.csv")).unwrap();
    let expected = initial_plan(&cfg, &xs, &ys, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(plan, expected);
    let progress = std::fs::read_to_string(dir.path().join("c.progress.csv")).unwrap();
    assert!(progress.is_empty());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), 30, 2);
    let config = dir.path().join("cfg.json");
    std::fs::write(&config, r#"{"steps": 5, "seed": 3, "epsilon": 0.2, "k": 2}"#).unwrap();
    let ckpt = dir.path().join("c.json");
    let progress = dir.path().join("p.csv");
    ok(&[
        "train",
        "--source",
        s(&dir.path().join("source.csv")),
        "--target",
        s(&dir.path().join("target.csv")),
        "--out",
        s(&ckpt),
        "--progress",
        s(&progress),
        "--config",
        s(&config),
        "--seed",
        "8",
    ]);
    let (meta, plan) = load_checkpoint(&ckpt).unwrap();
    assert_eq!((meta.seed, meta.steps_trained), (8, 5));
    assert_eq!(plan.epsilon(), 0.2);
    assert_eq!(plan.v.n_components(), 2);
    assert_eq!(plan.u.n_components(), 5);
    let lines: Vec<String> = std::fs::read_to_string(&progress).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("0,"));
}

#[test]
fn input_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = ulight(&["train", "--source", s(&missing), "--target", s(&missing), "--out", s(&dir.path().join("c.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));

    generate(dir.path(), 10, 0);
    let out = ulight(&[
        "train",
        "--source",
        s(&dir.path().join("source.csv")),
        "--target",
        s(&dir.path().join("target.csv")),
        "--out",
        s(&dir.path().join("c.json")),
        "--epsilon",
        "-1",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = ulight(&["sample", "--checkpoint", s(&dir.path().join("nope.json")), "--marginal", "--out", s(&dir.path().join("s.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

fn handmade_checkpoint(path: &Path, epsilon: f64) -> PlanModel {
    let v = GaussianMixture::new(array![0.0], array![[2.0, -1.0]], array![[0.0, 0.0]]).unwrap();
    let u = GaussianMixture::new(
        Array1::from(vec![0.2f64.ln(), 0.5f64.ln()]),
        array![[-1.0, 0.0], [3.0, 1.0]],
        array![[0.0, 0.5], [-0.5, 0.0]],
    )
    .unwrap();
    let plan = PlanModel::new(epsilon, v, u, DivergenceSpec::kl(1.0), DivergenceSpec::kl(1.0)).unwrap();
    save_checkpoint(path, &Checkpoint::from_plan(&plan, 0, 0)).unwrap();
    plan
}

#[test]
fn conditional_sampling_follows_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("c.json");
    // tiny epsilon: the conditional collapses onto r + S x with S = I
    handmade_checkpoint(&ckpt, 1e-8);
    let xs: Array2<f64> = array![[0.0, 0.0], [1.5, -2.0], [-3.0, 4.0]];
    write_dataset(&dir.path().join("x.csv"), &xs).unwrap();
    let out = dir.path().join("y.csv");
    ok(&["sample", "--checkpoint", s(&ckpt), "--source", s(&dir.path().join("x.csv")), "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("x0,x1,y0,y1\n"));
    let table = read_dataset(&out).unwrap();
    assert_eq!(table.nrows(), 3);
    for (row, x) in table.rows().into_iter().zip(xs.rows()) {
        assert_eq!(row[0], x[0]);
        assert!((row[2] - (2.0 + x[0])).abs() < 1e-3);
        assert!((row[3] - (-1.0 + x[1])).abs() < 1e-3);
    }
}

#[test]
fn marginal_sampling_matches_the_left_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("c.json");
    let eps = 0.5;
    let plan = handmade_checkpoint(&ckpt, eps);
    let out = dir.path().join("m.csv");
    let n = 20_000;
    let stdout = ok(&["sample", "--checkpoint", s(&ckpt), "--marginal", "--n", &n.to_string(), "--seed", "3", "--out", s(&out)]);
    let mass: f64 = stdout.trim().strip_prefix("learned_mass=").unwrap().parse().unwrap();
    assert!((mass - 0.7).abs() < 1e-12);
    let draws = read_dataset(&out).unwrap();
    assert_eq!(draws.nrows(), n);
    // normalized weights 2/7 and 5/7
    let w = [2.0 / 7.0, 5.0 / 7.0];
    for i in 0..2 {
        let mean: f64 = (0..2).map(|k| w[k] * plan.u.means()[[k, i]]).sum();
        let second: f64 = (0..2)
            .map(|k| w[k] * (eps * plan.u.diag_cov(k)[i] + plan.u.means()[[k, i]].powi(2)))
            .sum();
        let sd = (second - mean * mean).sqrt();
        let got = draws.column(i).mean().unwrap();
        assert!((got - mean).abs() < 4.0 * sd / (n as f64).sqrt(), "axis {i}: {got} vs {mean}");
    }
}

#[test]
fn evaluate_reports_metrics_for_a_trained_plan() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), 400, 5);
    let ckpt = dir.path().join("c.json");
    let source = dir.path().join("source.csv");
    let target = dir.path().join("target.csv");
    ok(&["train", "--source", s(&source), "--target", s(&target), "--out", s(&ckpt), "--steps", "300", "--div", "kl", "--tau1", "10", "--tau2", "10"]);
    let report_path = dir.path().join("r.json");
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--source", s(&source), "--target", s(&target), "--out", s(&report_path), "--w2-samples", "128"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let (_, plan) = load_checkpoint(&ckpt).unwrap();
    assert!((report["learned_mass"].as_f64().unwrap() - plan.u.total_mass()).abs() < 1e-12);
    assert!(report["ot_cost"].as_f64().unwrap() > 0.0);
    assert!(report["w2"].as_f64().unwrap() >= 0.0);
    assert!(report["elapsed_seconds"].as_f64().unwrap() >= 0.0);
    let matrix = report["mode_matrix"].as_array().unwrap();
    assert_eq!(matrix.len(), 2);
    for row in matrix {
        let total: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn oracle_tasks_pass_and_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    for (task, extra) in [
        ("sinkhorn", vec![]),
        ("sinkhorn", vec!["--div", "balanced"]),
        ("duality-gap", vec!["--tau2", "2"]),
        ("duality-gap", vec!["--div", "chi2"]),
        ("bound-check", vec!["--draws", "10"]),
    ] {
        let out = dir.path().join("o.json");
        let mut args = vec!["oracle", task, "--out", s(&out)];
        args.extend(extra.iter().copied());
        let stdout = ok(&args);
        let printed: serde_json::Value = serde_json::from_str(&stdout).unwrap();
        let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(printed, written);
        assert_eq!(written["pass"], true, "{task} {extra:?}: {written}");
    }
}

#[test]
fn failed_oracle_check_exits_with_code_one() {
    // an unreachable tolerance within a handful of iterations
    let out = ulight(&["oracle", "duality-gap", "--max-iter", "1", "--tol", "1e-300"]);
    assert_eq!(out.status.code(), Some(1));
}
