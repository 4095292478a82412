use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use otdro::conic_solver::{solve, ConicProblemData, ProblemFile, SolverSettings};
use otdro::coverage::Reference;
use otdro::experiments::{out_of_sample, run_experiment, sensitivity_sweep, write_report, ExperimentConfig};
use otdro::repro::{repro, ReproScale, ReproTarget};
use otdro::trainer::{fmt_f64, TrainSetup};
use otdro::transport_metrics::{DistributionFile, ParamFile};

#[derive(Parser)]
#[command(name = "otdro", version, about = "Learned optimal-transport ambiguity sets for DRO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of an experiment config file.
#[derive(clap::Args, Clone, Debug)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    maxiter: Option<usize>,
    #[arg(long)]
    oos_samples: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a conic program given as JSON.
    Solve {
        problem: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Transport distance between two distributions.
    Distance {
        a: PathBuf,
        b: PathBuf,
        #[arg(long = "L")]
        l: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        p: Option<u32>,
        #[arg(long)]
        grad: bool,
    },
    /// Print the conic program of trial 0 at L = I.
    Build {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run an experiment and write metrics, traces and learned parameters.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a fixed L on every trial of an experiment.
    Eval {
        config: PathBuf,
        #[arg(long)]
        theta: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Regenerate the CSVs behind a published figure.
    Repro {
        target: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Smoke-sized run.
        #[arg(long)]
        quick: bool,
    },
    /// Grid over the penalty weight and sigmoid steepness.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambda_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        eta_grid: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

type CliResult = Result<usize, Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn run_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Run(e.into())
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(config_err)
}

fn load_config(path: &Path, o: &Overrides) -> Result<ExperimentConfig, Failure> {
    let mut cfg: ExperimentConfig = read_json(path)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(t) = o.trials {
        cfg.trials = t;
    }
    if let Some(j) = o.samples {
        cfg.samples = j;
    }
    if let Some(m) = o.maxiter {
        cfg.train.maxiter = m;
    }
    if let Some(n) = o.oos_samples {
        cfg.oos_samples = n;
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn cmd_solve(problem: &Path, tol: f64) -> CliResult {
    let file: ProblemFile = read_json(problem)?;
    let p = ConicProblemData::from_file(&file).map_err(config_err)?;
    let settings = SolverSettings {
        tol,
        ..SolverSettings::default()
    };
    settings.validate().map_err(config_err)?;
    let sol = solve(&p, &settings).map_err(run_err)?;
    print_json(&json!({
        "status": format!("{:?}", sol.status),
        "objective": p.objective(&sol.x),
        "iterations": sol.iterations,
        "primal_res": sol.primal_res,
        "dual_res": sol.dual_res,
        "gap": sol.gap,
        "x": sol.x.as_slice(),
        "y": sol.y.as_slice(),
        "s": sol.s.as_slice(),
    }));
    Ok(usize::from(!sol.is_optimal()))
}

fn cmd_distance(a: &Path, b: &Path, l: &Path, p: Option<u32>, grad: bool) -> CliResult {
    let fa: DistributionFile = read_json(a)?;
    let fb: DistributionFile = read_json(b)?;
    let mut pf: ParamFile = read_json(l)?;
    if let Some(p) = p {
        pf.p = p;
    }
    let param = pf.to_param().map_err(config_err)?;
    let ra = Reference::from_file(&fa).map_err(config_err)?;
    let rb = Reference::from_file(&fb).map_err(config_err)?;
    if ra.mode() != rb.mode() {
        return Err(config_err(anyhow!("both distributions must be discrete or both Gaussian")));
    }
    let d = ra.distance(&rb, &param).map_err(run_err)?;
    let mut out = json!({ "distance": d });
    if grad {
        let g = ra.distance_gradient(&rb, &param).map_err(run_err)?;
        out["gradient"] = json!(rows(&g));
    }
    print_json(&out);
    Ok(0)
}

fn cmd_build(config: &Path, o: &Overrides) -> CliResult {
    let cfg = load_config(config, o)?;
    let data = cfg.dataset(0).map_err(run_err)?;
    let setup = TrainSetup::new(cfg.family.builder(), data, &cfg.train_config(0)).map_err(run_err)?;
    let theta0 = otdro::transport_metrics::TransportParam::identity(setup.data.dim(), cfg.family.builder().order());
    let inst = setup.build(&theta0).map_err(run_err)?;
    let file = inst.conic.to_file();
    print_json(&serde_json::to_value(&file).map_err(run_err)?);
    Ok(0)
}

fn cmd_train(config: &Path, out: &Path, o: &Overrides) -> CliResult {
    let cfg = load_config(config, o)?;
    let report = run_experiment(&cfg, None).map_err(run_err)?;
    write_report(&report, out).map_err(run_err)?;
    let theta_dir = out.join("theta");
    fs::create_dir_all(&theta_dir).map_err(run_err)?;
    for r in &report.results {
        let text = serde_json::to_string_pretty(&ParamFile::from_param(&r.trace.theta)).map_err(run_err)?;
        fs::write(theta_dir.join(format!("trial_{:03}.json", r.metrics.trial)), text).map_err(run_err)?;
    }
    fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&cfg).map_err(run_err)?,
    )
    .map_err(run_err)?;
    eprintln!(
        "{} trials, {} failed; mean worst-case improvement {:.4}, mean out-of-sample improvement {:.4}",
        report.results.len(),
        report.failures.len(),
        report.mean(|m| m.rel_f),
        report.mean(|m| m.rel_l)
    );
    Ok(report.failures.len())
}

fn cmd_eval(config: &Path, theta: &Path, o: &Overrides) -> CliResult {
    let cfg = load_config(config, o)?;
    let pf: ParamFile = read_json(theta)?;
    let param = pf.to_param().map_err(config_err)?;
    let builder = cfg.family.builder();
    if param.p() != builder.order() || param.dim() != cfg.dataset(0).map_err(run_err)?.dim() {
        return Err(config_err(anyhow!(
            "theta must be {}x{} with p = {}",
            cfg.dataset(0).map_err(run_err)?.dim(),
            cfg.dataset(0).map_err(run_err)?.dim(),
            builder.order()
        )));
    }
    let settings = SolverSettings::default();
    let mut failures = 0;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.write_record(["trial", "worst_case", "out_of_sample"]).map_err(run_err)?;
    for t in 0..cfg.trials {
        let eval = || -> anyhow::Result<(f64, f64)> {
            let setup = TrainSetup::new(builder, cfg.dataset(t)?, &cfg.train_config(t))?;
            let inst = setup.build(&param)?;
            let sol = solve(&inst.conic, &settings)?.require_optimal()?;
            let f = inst.reported_objective(inst.conic.objective(&sol.x));
            let l = out_of_sample(&cfg, &cfg.truth(t), &inst.decision(&sol.x), t)?;
            Ok((f, l))
        };
        match eval() {
            Ok((f, l)) => w.write_record([t.to_string(), fmt_f64(f), fmt_f64(l)]).map_err(run_err)?,
            Err(e) => {
                log::warn!("trial {t}: {e:#}");
                failures += 1;
            }
        }
    }
    w.flush().map_err(run_err)?;
    Ok(failures)
}

fn cmd_repro(target: &str, seed: u64, out: &Path, quick: bool) -> CliResult {
    let target: ReproTarget = target.parse().map_err(config_err)?;
    let scale = if quick { ReproScale::Quick } else { ReproScale::Full };
    repro(target, seed, out, scale).map_err(run_err)
}

fn cmd_sweep(config: &Path, lambdas: &[f64], etas: &[f64], out: &Path, o: &Overrides) -> CliResult {
    let cfg = load_config(config, o)?;
    if lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) || etas.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(config_err(anyhow!("lambda grid must be >= 0 and eta grid > 0")));
    }
    let sweep = sensitivity_sweep(&cfg, lambdas, etas).map_err(run_err)?;
    sweep.write(out).map_err(run_err)?;
    Ok(sweep.failures)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve { problem, tol } => cmd_solve(problem, *tol),
        Command::Distance { a, b, l, p, grad } => cmd_distance(a, b, l, *p, *grad),
        Command::Build { config, overrides } => cmd_build(config, overrides),
        Command::Train { config, out, overrides } => cmd_train(config, out, overrides),
        Command::Eval {
            config,
            theta,
            overrides,
        } => cmd_eval(config, theta, overrides),
        Command::Repro {
            target,
            seed,
            out,
            quick,
        } => cmd_repro(target, *seed, out, *quick),
        Command::Sweep {
            config,
            lambda_grid,
            eta_grid,
            out,
            overrides,
        } => cmd_sweep(config, lambda_grid, eta_grid, out, overrides),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} trial(s) failed");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
    }
}
