//! Fixed experiment recipes behind `otdro repro`. Every output is a CSV
//! derived only from the seed, so two runs with the same seed are
//! byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{
    run_experiment, run_trial, sensitivity_sweep, ExperimentConfig, Family, LinregMode,
};
use crate::trainer::fmt_f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReproTarget {
    /// Gaussian portfolio: single-instance trace and improvement against `J`.
    Fig1,
    /// Gaussian portfolio: normalized truth distance with and without the
    /// coverage penalty.
    Fig2,
    /// Absolute-loss regression: single-instance trace and errors.
    Fig3,
    /// Absolute-loss regression over the ten fixture models.
    Fig4,
    Sensitivity,
}

impl ReproTarget {
    pub const ALL: [ReproTarget; 5] = [
        ReproTarget::Fig1,
        ReproTarget::Fig2,
        ReproTarget::Fig3,
        ReproTarget::Fig4,
        ReproTarget::Sensitivity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReproTarget::Fig1 => "fig1",
            ReproTarget::Fig2 => "fig2",
            ReproTarget::Fig3 => "fig3",
            ReproTarget::Fig4 => "fig4",
            ReproTarget::Sensitivity => "sensitivity",
        }
    }
}

impl std::str::FromStr for ReproTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ReproTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown repro target {s:?}")))
    }
}

/// Run size: `Full` follows the published setups (trial counts reduced to
/// keep a desktop run under an hour), `Quick` is a smoke-sized version.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReproScale {
    Full,
    Quick,
}

struct Plan {
    trials: usize,
    oos: usize,
    maxiter: usize,
    sample_sizes: Vec<usize>,
}

fn plan(target: ReproTarget, scale: ReproScale) -> Plan {
    match scale {
        ReproScale::Quick => Plan {
            trials: if target == ReproTarget::Fig1 || target == ReproTarget::Fig3 { 1 } else { 2 },
            oos: 10_000,
            maxiter: 50,
            sample_sizes: vec![10, 30],
        },
        ReproScale::Full => Plan {
            trials: match target {
                ReproTarget::Fig1 | ReproTarget::Fig2 => 20,
                ReproTarget::Fig3 => 1,
                ReproTarget::Fig4 => 20,
                ReproTarget::Sensitivity => 5,
            },
            oos: 1_000_000,
            maxiter: 1_000_000,
            sample_sizes: vec![10, 30, 50, 100],
        },
    }
}

fn base_config(family: Family, k: usize, samples: usize, seed: u64, plan: &Plan) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(family, k, samples);
    cfg.seed = seed;
    cfg.trials = plan.trials;
    cfg.oos_samples = plan.oos;
    cfg.train.maxiter = plan.maxiter;
    cfg
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn vector_string(v: &nalgebra::DVector<f64>) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ")
}

/// Writes the single-trial outputs: trace, final `L`, decisions and errors.
fn single_instance(cfg: &ExperimentConfig, dir: &Path) -> Result<usize> {
    let res = run_trial(cfg, 0)?;
    res.trace.save_csv(&dir.join("trace.csv"))?;
    let l = res.trace.theta.l();
    let rows: Vec<Vec<String>> = (0..l.nrows())
        .map(|i| (0..l.ncols()).map(|j| fmt_f64(l[(i, j)])).collect())
        .collect();
    let header: Vec<String> = (0..l.ncols()).map(|j| format!("c{j}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(&dir.join("theta.csv"), &header, &rows)?;
    let m = &res.metrics;
    write_rows(
        &dir.join("summary.csv"),
        &["stage", "worst_case", "out_of_sample", "w", "normalized_distance"],
        &[
            vec![
                "initial".into(),
                fmt_f64(m.f0),
                fmt_f64(m.l0),
                vector_string(&res.trace.w0),
                fmt_f64(m.dist0),
            ],
            vec![
                "final".into(),
                fmt_f64(m.f_star),
                fmt_f64(m.l_star),
                vector_string(&res.trace.w),
                fmt_f64(m.dist_star),
            ],
        ],
    )?;
    Ok(0)
}

/// Improvement against the number of samples. Returns the failure count.
fn improvement_curve(cfg: &ExperimentConfig, sizes: &[usize], dir: &Path) -> Result<usize> {
    let mut rows = Vec::new();
    let mut failures = 0;
    for &j in sizes {
        let mut c = cfg.clone();
        c.samples = j;
        let report = run_experiment(&c, Some(&dir.join(format!("J{j}"))))?;
        failures += report.failures.len();
        rows.push(vec![
            j.to_string(),
            report.results.len().to_string(),
            fmt_f64(report.mean(|m| m.rel_f)),
            fmt_f64(report.mean(|m| m.rel_l)),
        ]);
    }
    write_rows(
        &dir.join("improvement.csv"),
        &["samples", "trials", "mean_rel_f", "mean_rel_l"],
        &rows,
    )?;
    Ok(failures)
}

/// Runs one target into `out/<name>`. Returns the number of failed trials.
pub fn repro(target: ReproTarget, seed: u64, out: &Path, scale: ReproScale) -> Result<usize> {
    let dir = out.join(target.name());
    fs::create_dir_all(&dir)?;
    let p = plan(target, scale);
    match target {
        ReproTarget::Fig1 => {
            let single = base_config(Family::PortfolioGaussian, 2, 30, seed, &p);
            single_instance(&single, &dir)?;
            let mut multi = base_config(Family::PortfolioGaussian, 3, 30, seed, &p);
            multi.datasets_per_truth = if scale == ReproScale::Full { 2 } else { 1 };
            improvement_curve(&multi, &p.sample_sizes, &dir)
        }
        ReproTarget::Fig2 => {
            let cfg = base_config(Family::PortfolioGaussian, 3, 30, seed, &p);
            let with = run_experiment(&cfg, None)?;
            let mut ablation = cfg.clone();
            ablation.train.lambda_p = 0.0;
            let without = run_experiment(&ablation, None)?;
            let rows: Vec<Vec<String>> = with
                .results
                .iter()
                .filter_map(|a| {
                    let b = without.results.iter().find(|b| b.metrics.trial == a.metrics.trial)?;
                    Some(vec![
                        a.metrics.trial.to_string(),
                        fmt_f64(a.metrics.dist0),
                        fmt_f64(a.metrics.dist_star),
                        fmt_f64(b.metrics.dist_star),
                        fmt_f64(a.metrics.e_star),
                        fmt_f64(b.metrics.e_star),
                    ])
                })
                .collect();
            write_rows(
                &dir.join("coverage.csv"),
                &["trial", "dist0", "dist_star", "dist_star_no_penalty", "e_star", "e_star_no_penalty"],
                &rows,
            )?;
            Ok(with.failures.len() + without.failures.len())
        }
        ReproTarget::Fig3 => {
            let cfg = base_config(Family::RegressionAbs, 1, 20, seed, &p);
            single_instance(&cfg, &dir)
        }
        ReproTarget::Fig4 => {
            let mut cfg = base_config(Family::RegressionAbs, 1, 20, seed, &p);
            cfg.linreg = LinregMode::Table4;
            cfg.datasets_per_truth = if scale == ReproScale::Full { 2 } else { 1 };
            let sizes: &[usize] = match scale {
                ReproScale::Full => &[10, 20, 50],
                ReproScale::Quick => &[10, 20],
            };
            improvement_curve(&cfg, sizes, &dir)
        }
        ReproTarget::Sensitivity => {
            let cfg = base_config(Family::PortfolioGaussian, 3, 30, seed, &p);
            let (lambdas, etas): (Vec<f64>, Vec<f64>) = match scale {
                ReproScale::Full => (vec![0.0, 1.0, 10.0, 100.0], vec![10.0, 100.0, 1000.0]),
                ReproScale::Quick => (vec![0.0, 10.0], vec![100.0]),
            };
            let sweep = sensitivity_sweep(&cfg, &lambdas, &etas)?;
            sweep.write(&dir)?;
            Ok(sweep.failures)
        }
    }
}
