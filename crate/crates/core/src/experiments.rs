//! Synthetic experiments: true-distribution generators, Monte-Carlo
//! out-of-sample evaluation, per-trial metrics and the sensitivity sweep.
//!
//! Seeds: every random stream is derived from the run seed with
//! [`derive_seed`] (SplitMix64 over `seed`, a stream tag and an index), so
//! trials are reproducible independently of one another.

use std::fs;
use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coverage::Reference;
use crate::dro_problems::{BuilderId, DatasetView};
use crate::error::{Error, Result};
use crate::trainer::{fmt_f64, train_with, TrainConfig, TrainSetup, TrainTrace};
use crate::transport_metrics::{DiscreteDistribution, GaussianMoments, TransportParam};

/// Number of draws used to stand in for a continuous truth when measuring its
/// transport distance to a discrete reference.
pub const TRUTH_PROXY_SAMPLES: usize = 500;

const TAG_TRUTH: u64 = 1;
const TAG_DATA: u64 = 2;
const TAG_OOS: u64 = 3;
const TAG_PROXY: u64 = 4;
const TAG_TRAIN: u64 = 5;

/// SplitMix64 finalizer applied to `seed ⊕ tag ⊕ index`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_cov(k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let s = DMatrix::from_fn(k, k, |_, _| rng.random_range(0.01..=0.1));
    let mut cov = &s * s.transpose() + DMatrix::identity(k, k) * 1e-6;
    cov = (&cov + cov.transpose()) * 0.5;
    cov
}

fn dirichlet_weights(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    if n == 1 {
        return DVector::from_element(1, 1.0);
    }
    // Dirichlet(1, …, 1) as normalized Gamma(1) = Exp(1) draws.
    let w: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = w.iter().sum();
    DVector::from_iterator(n, w.into_iter().map(|v| v / s))
}

/// Gaussian truth: `μ ~ U[−1,1]^k`, `Σ = Σ̃Σ̃ᵀ + 1e-6 I` with `Σ̃` entries in
/// `[0.01, 0.1]`.
pub fn gen_gaussian_experiment(k: usize, seed: u64) -> GaussianMoments<f64> {
    let mut rng = rng_for(seed);
    let mean = DVector::from_fn(k, |_, _| rng.random_range(-1.0..=1.0));
    let cov = random_cov(k, &mut rng);
    GaussianMoments::new(mean, cov).expect("ridged covariance is PD")
}

/// Discrete truth: atoms uniform in `[−1,1]^k`, Dirichlet(1) weights.
pub fn gen_discrete_experiment(k: usize, n_atoms: usize, seed: u64) -> DiscreteDistribution<f64> {
    let mut rng = rng_for(seed);
    let points = DMatrix::from_fn(n_atoms, k, |_, _| rng.random_range(-1.0..=1.0));
    let weights = dirichlet_weights(n_atoms, &mut rng);
    DiscreteDistribution::new(points, weights).expect("valid atoms and weights")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub weights: DVector<f64>,
    pub components: Vec<GaussianMoments<f64>>,
}

impl GaussianMixture {
    pub fn mean(&self) -> DVector<f64> {
        self.components
            .iter()
            .zip(self.weights.iter())
            .fold(DVector::zeros(self.components[0].dim()), |acc, (c, &a)| acc + &c.mean * a)
    }
}

/// Mixture truth: component means uniform in the cube, covariances as in
/// [`gen_gaussian_experiment`], Dirichlet(1) mixture weights.
pub fn gen_gmm_experiment(k: usize, n_comp: usize, seed: u64) -> GaussianMixture {
    let mut rng = rng_for(seed);
    let weights = dirichlet_weights(n_comp, &mut rng);
    let components = (0..n_comp)
        .map(|_| {
            let mean = DVector::from_fn(k, |_, _| rng.random_range(-1.0..=1.0));
            GaussianMoments::new(mean, random_cov(k, &mut rng)).expect("ridged covariance is PD")
        })
        .collect();
    GaussianMixture { weights, components }
}

/// `y = w x + e`, `e ~ N(0, σ²)`, `x ~ U(−10, 10)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: f64,
    pub sigma: f64,
}

/// The ten regression models used for the multi-experiment study, as
/// `(w, σ²)`.
pub const TABLE4_MODELS: [(f64, f64); 10] = [
    (-6.7805, 564.285),
    (-5.8464, 625.412),
    (-2.7811, 699.653),
    (-1.3851, 710.190),
    (-0.0144, 783.458),
    (4.3483, 846.372),
    (6.3163, 915.492),
    (7.1061, 922.537),
    (8.5174, 932.399),
    (8.9350, 978.001),
];

pub fn table4_models() -> Vec<LinearModel> {
    TABLE4_MODELS
        .iter()
        .map(|&(w, var)| LinearModel { w, sigma: var.sqrt() })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinregMode {
    /// `w = 1`, `σ = 10`.
    #[default]
    Fixed,
    /// `w ~ U[−10, 10]`, `σ² ~ U[500, 1000]`.
    Random,
    /// Cycle through the ten fixture models.
    Table4,
}

pub fn gen_linreg_experiment(mode: LinregMode, index: usize, seed: u64) -> LinearModel {
    match mode {
        LinregMode::Fixed => LinearModel { w: 1.0, sigma: 10.0 },
        LinregMode::Table4 => table4_models()[index % TABLE4_MODELS.len()],
        LinregMode::Random => {
            let mut rng = rng_for(seed);
            let w = rng.random_range(-10.0..=10.0);
            let var: f64 = rng.random_range(500.0..=1000.0);
            LinearModel { w, sigma: var.sqrt() }
        }
    }
}

/// Data-generating distribution of one trial.
#[derive(Clone, Debug, PartialEq)]
pub enum TrueDistribution {
    Gaussian(GaussianMoments<f64>),
    Discrete(DiscreteDistribution<f64>),
    Mixture(GaussianMixture),
    /// Samples `(x, y)`.
    Linear(LinearModel),
}

fn gaussian_factor(m: &GaussianMoments<f64>) -> DMatrix<f64> {
    m.cov
        .clone()
        .cholesky()
        .map(|c| c.l())
        .unwrap_or_else(|| crate::transport_metrics::sqrtm_psd(&m.cov).expect("PSD covariance"))
}

/// Precomputed sampler state.
struct Sampler<'a> {
    truth: &'a TrueDistribution,
    factors: Vec<DMatrix<f64>>,
    cumulative: Vec<f64>,
}

impl<'a> Sampler<'a> {
    fn new(truth: &'a TrueDistribution) -> Self {
        let (factors, cumulative) = match truth {
            TrueDistribution::Gaussian(m) => (vec![gaussian_factor(m)], vec![]),
            TrueDistribution::Discrete(d) => (vec![], cumsum(d.weights())),
            TrueDistribution::Mixture(g) => (g.components.iter().map(gaussian_factor).collect(), cumsum(&g.weights)),
            TrueDistribution::Linear(_) => (vec![], vec![]),
        };
        Sampler {
            truth,
            factors,
            cumulative,
        }
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }

    fn gaussian_into(m: &GaussianMoments<f64>, f: &DMatrix<f64>, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let k = m.dim();
        let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        for (i, o) in out.iter_mut().enumerate() {
            *o = m.mean[i] + (0..k).map(|j| f[(i, j)] * z[j]).sum::<f64>();
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self.truth {
            TrueDistribution::Gaussian(m) => Self::gaussian_into(m, &self.factors[0], rng, out),
            TrueDistribution::Discrete(d) => {
                let i = self.pick(rng);
                for (c, o) in out.iter_mut().enumerate() {
                    *o = d.points()[(i, c)];
                }
            }
            TrueDistribution::Mixture(g) => {
                let i = self.pick(rng);
                Self::gaussian_into(&g.components[i], &self.factors[i], rng, out)
            }
            TrueDistribution::Linear(lm) => {
                let x = rng.random_range(-10.0..=10.0);
                let e: f64 = StandardNormal.sample(rng);
                out[0] = x;
                out[1] = lm.w * x + lm.sigma * e;
            }
        }
    }
}

fn cumsum(w: &DVector<f64>) -> Vec<f64> {
    let mut acc = 0.0;
    w.iter()
        .map(|&v| {
            acc += v;
            acc
        })
        .collect()
}

impl TrueDistribution {
    pub fn dim(&self) -> usize {
        match self {
            TrueDistribution::Gaussian(m) => m.dim(),
            TrueDistribution::Discrete(d) => d.dim(),
            TrueDistribution::Mixture(g) => g.components[0].dim(),
            TrueDistribution::Linear(_) => 2,
        }
    }

    /// `n` draws as rows.
    pub fn sample(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let d = self.dim();
        let sampler = Sampler::new(self);
        let mut rng = rng_for(seed);
        let mut buf = vec![0.0; d];
        let mut out = DMatrix::zeros(n, d);
        for r in 0..n {
            sampler.draw(&mut rng, &mut buf);
            for (c, v) in buf.iter().enumerate() {
                out[(r, c)] = *v;
            }
        }
        out
    }

    /// Streams `n` draws through `f` without materializing them.
    fn for_each_draw(&self, n: usize, seed: u64, mut f: impl FnMut(&[f64])) {
        let sampler = Sampler::new(self);
        let mut rng = rng_for(seed);
        let mut buf = vec![0.0; self.dim()];
        for _ in 0..n {
            sampler.draw(&mut rng, &mut buf);
            f(&buf);
        }
    }
}

/// Empirical `CVaR_γ` of the loss `−wᵀξ` from `n` draws: the mean of the
/// largest `γn` losses, with the boundary draw weighted fractionally.
pub fn eval_oos_cvar(w: &DVector<f64>, truth: &TrueDistribution, gamma: f64, n: usize, seed: u64) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidInput("gamma must lie in (0, 1]".into()));
    }
    if (n as f64) < 100.0 / gamma {
        return Err(Error::InvalidInput(format!("need at least {} samples", (100.0 / gamma).ceil())));
    }
    if w.len() != truth.dim() {
        return Err(Error::DimensionMismatch {
            context: "portfolio weights",
            expected: truth.dim(),
            got: w.len(),
        });
    }
    let mut losses = Vec::with_capacity(n);
    truth.for_each_draw(n, seed, |xi| {
        losses.push(-xi.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>());
    });
    Ok(upper_tail_mean(&mut losses, gamma))
}

fn upper_tail_mean(losses: &mut [f64], gamma: f64) -> f64 {
    let n = losses.len();
    let mass = gamma * n as f64;
    let whole = (mass.floor() as usize).min(n);
    losses.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut total: f64 = losses[..whole].iter().sum();
    let frac = mass - whole as f64;
    if frac > 0.0 && whole < n {
        total += frac * losses[whole];
    }
    total / mass
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionLoss {
    Abs,
    Sq,
}

/// Monte-Carlo mean of `|(−w, 1)ᵀξ|` or its square.
pub fn eval_oos_expected_loss(
    w: &DVector<f64>,
    truth: &TrueDistribution,
    loss: RegressionLoss,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    if w.len() + 1 != truth.dim() {
        return Err(Error::DimensionMismatch {
            context: "regression weights",
            expected: truth.dim() - 1,
            got: w.len(),
        });
    }
    let k = w.len();
    let mut total = 0.0;
    truth.for_each_draw(n, seed, |xi| {
        let r = xi[k] - xi[..k].iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>();
        total += match loss {
            RegressionLoss::Abs => r.abs(),
            RegressionLoss::Sq => r * r,
        };
    });
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PortfolioGaussian,
    PortfolioDiscrete,
    PortfolioGmm,
    RegressionAbs,
    RegressionSq,
}

impl Family {
    pub fn builder(self) -> BuilderId {
        match self {
            Family::PortfolioGaussian => BuilderId::PortfolioGaussian,
            Family::PortfolioDiscrete | Family::PortfolioGmm => BuilderId::PortfolioT1,
            Family::RegressionAbs => BuilderId::RegressionAbs,
            Family::RegressionSq => BuilderId::RegressionSq,
        }
    }

    pub fn is_regression(self) -> bool {
        self.builder().is_regression()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: Family,
    /// Number of assets (portfolio); regression always has one feature.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Samples per dataset.
    pub samples: usize,
    /// Datasets drawn per true distribution.
    #[serde(default = "one")]
    pub datasets_per_truth: usize,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default)]
    pub linreg: LinregMode,
    #[serde(default = "default_oos")]
    pub oos_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_k() -> usize {
    3
}

fn one() -> usize {
    1
}

fn default_oos() -> usize {
    1_000_000
}

impl ExperimentConfig {
    pub fn new(family: Family, k: usize, samples: usize) -> Self {
        ExperimentConfig {
            family,
            k,
            samples,
            datasets_per_truth: 1,
            trials: 1,
            linreg: LinregMode::default(),
            oos_samples: default_oos(),
            seed: 0,
            train: TrainConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidInput(format!("experiment config: {what}")));
        if self.k == 0 && !self.family.is_regression() {
            return bad("k must be positive");
        }
        if self.samples < 2 {
            return bad("samples must be at least 2");
        }
        if self.trials == 0 || self.datasets_per_truth == 0 {
            return bad("trials and datasets_per_truth must be positive");
        }
        if self.oos_samples == 0 {
            return bad("oos_samples must be positive");
        }
        if !self.family.is_regression() && (self.oos_samples as f64) < 100.0 / self.train.gamma {
            return bad("oos_samples must be at least 100/gamma");
        }
        self.train.validate()
    }

    /// Truth of trial `trial` (shared by consecutive datasets).
    pub fn truth(&self, trial: usize) -> TrueDistribution {
        let t = (trial / self.datasets_per_truth) as u64;
        let seed = derive_seed(self.seed, TAG_TRUTH, t);
        match self.family {
            Family::PortfolioGaussian => TrueDistribution::Gaussian(gen_gaussian_experiment(self.k, seed)),
            Family::PortfolioDiscrete => TrueDistribution::Discrete(gen_discrete_experiment(self.k, 10, seed)),
            Family::PortfolioGmm => TrueDistribution::Mixture(gen_gmm_experiment(self.k, 3, seed)),
            Family::RegressionAbs | Family::RegressionSq => {
                TrueDistribution::Linear(gen_linreg_experiment(self.linreg, t as usize, seed))
            }
        }
    }

    pub fn dataset(&self, trial: usize) -> Result<DatasetView<f64>> {
        let rows = self.truth(trial).sample(self.samples, derive_seed(self.seed, TAG_DATA, trial as u64));
        DatasetView::new(rows)
    }

    pub fn train_config(&self, trial: usize) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, TAG_TRAIN, trial as u64),
            ..self.train.clone()
        }
    }

    fn oos_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, TAG_OOS, trial as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub trial: usize,
    pub f0: f64,
    pub f_star: f64,
    pub l0: f64,
    pub l_star: f64,
    pub rel_f: f64,
    pub rel_l: f64,
    pub e_star: f64,
    pub dist0: f64,
    pub dist_star: f64,
    pub iterations: usize,
}

pub const METRICS_HEADER: [&str; 11] = [
    "trial",
    "f0",
    "f_star",
    "l0",
    "l_star",
    "rel_f",
    "rel_l",
    "e_star",
    "dist0",
    "dist_star",
    "iterations",
];

impl MetricsRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.trial.to_string(),
            fmt_f64(self.f0),
            fmt_f64(self.f_star),
            fmt_f64(self.l0),
            fmt_f64(self.l_star),
            fmt_f64(self.rel_f),
            fmt_f64(self.rel_l),
            fmt_f64(self.e_star),
            fmt_f64(self.dist0),
            fmt_f64(self.dist_star),
            self.iterations.to_string(),
        ]
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}

/// Outcome of one trial.
#[derive(Clone, Debug)]
pub struct TrialResult {
    pub metrics: MetricsRow,
    pub trace: TrainTrace<f64>,
}

fn relative_improvement(before: f64, after: f64) -> f64 {
    (before - after) / before.abs().max(1e-12)
}

/// Out-of-sample loss of a decision under the trial's truth.
pub fn out_of_sample(cfg: &ExperimentConfig, truth: &TrueDistribution, w: &DVector<f64>, trial: usize) -> Result<f64> {
    let seed = cfg.oos_seed(trial);
    match cfg.family {
        Family::RegressionAbs => eval_oos_expected_loss(w, truth, RegressionLoss::Abs, cfg.oos_samples, seed),
        Family::RegressionSq => eval_oos_expected_loss(w, truth, RegressionLoss::Sq, cfg.oos_samples, seed),
        _ => eval_oos_cvar(w, truth, cfg.train.gamma, cfg.oos_samples, seed),
    }
}

/// `d(Q, P̂; θ)` between the truth and the trial's reference. Continuous
/// truths are replaced by [`TRUTH_PROXY_SAMPLES`] draws when the reference is
/// discrete.
pub fn truth_distance(
    truth: &TrueDistribution,
    base: &Reference<f64>,
    param: &TransportParam<f64>,
    proxy_seed: u64,
) -> Result<f64> {
    let q = match (truth, base) {
        (TrueDistribution::Gaussian(m), Reference::Gaussian(_)) => Reference::Gaussian(m.clone()),
        (TrueDistribution::Discrete(d), Reference::Discrete(_)) => Reference::Discrete(d.clone()),
        (_, Reference::Discrete(_)) => Reference::Discrete(DiscreteDistribution::uniform(
            truth.sample(TRUTH_PROXY_SAMPLES, proxy_seed),
        )?),
        (_, Reference::Gaussian(_)) => {
            return Err(Error::InvalidInput("Gaussian reference needs a Gaussian truth".into()));
        }
    };
    q.distance(base, param)
}

pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialResult> {
    let truth = cfg.truth(trial);
    let data = cfg.dataset(trial)?;
    let tcfg = cfg.train_config(trial);
    let setup = TrainSetup::new(cfg.family.builder(), data, &tcfg)?;
    let trace = train_with(&setup, &tcfg)?;
    let l0 = out_of_sample(cfg, &truth, &trace.w0, trial)?;
    let l_star = out_of_sample(cfg, &truth, &trace.w, trial)?;
    let theta0 = TransportParam::identity(trace.theta.dim(), trace.theta.p());
    let proxy = derive_seed(cfg.seed, TAG_PROXY, trial as u64);
    let eps = trace.eps;
    let dist0 = truth_distance(&truth, setup.base(), &theta0, proxy)? / eps;
    let dist_star = truth_distance(&truth, setup.base(), &trace.theta, proxy)? / eps;
    let (first, last) = (&trace.records[0], trace.final_record());
    let metrics = MetricsRow {
        trial,
        f0: first.objective,
        f_star: last.objective,
        l0,
        l_star,
        rel_f: relative_improvement(first.objective, last.objective),
        rel_l: relative_improvement(l0, l_star),
        e_star: last.e_theta,
        dist0,
        dist_star,
        iterations: trace.records.len() - 1,
    };
    let finite = [
        metrics.f0,
        metrics.f_star,
        metrics.l0,
        metrics.l_star,
        metrics.e_star,
        metrics.dist0,
        metrics.dist_star,
    ];
    if finite.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training {
            iter: metrics.iterations,
            reason: "non-finite trial metrics".into(),
        });
    }
    Ok(TrialResult { metrics, trace })
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentReport {
    pub results: Vec<TrialResult>,
    /// `(trial, message)` for trials that raised an error.
    pub failures: Vec<(usize, String)>,
}

impl ExperimentReport {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.results.iter().map(|r| r.metrics.clone()).collect()
    }

    pub fn mean(&self, f: impl Fn(&MetricsRow) -> f64) -> f64 {
        let n = self.results.len().max(1) as f64;
        self.results.iter().map(|r| f(&r.metrics)).sum::<f64>() / n
    }
}

/// Runs every trial (in parallel), then writes `metrics.csv` and
/// `traces/trial_NNN.csv` under `out` when given. Failed trials are logged
/// and reported, and the run continues.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let outcomes: Vec<(usize, Result<TrialResult>)> =
        (0..cfg.trials).into_par_iter().map(|t| (t, run_trial(cfg, t))).collect();
    let mut report = ExperimentReport::default();
    for (t, r) in outcomes {
        match r {
            Ok(res) => report.results.push(res),
            Err(e) => {
                warn!("trial {t} failed: {e}");
                report.failures.push((t, e.to_string()));
            }
        }
    }
    info!(
        "{} trials done, {} failed; mean rel_f {:.4e}, mean rel_l {:.4e}",
        report.results.len(),
        report.failures.len(),
        report.mean(|m| m.rel_f),
        report.mean(|m| m.rel_l)
    );
    if let Some(dir) = out {
        write_report(&report, dir)?;
    }
    Ok(report)
}

pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    let traces = dir.join("traces");
    fs::create_dir_all(&traces)?;
    write_metrics_csv(&report.rows(), &dir.join("metrics.csv"))?;
    for r in &report.results {
        r.trace.save_csv(&traces.join(format!("trial_{:03}.csv", r.metrics.trial)))?;
    }
    if !report.failures.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
        w.write_record(["trial", "error"])?;
        for (t, e) in &report.failures {
            w.write_record([t.to_string(), e.clone()])?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Mean worst-case improvement and 90th-percentile final violation over a
/// `λ_p × η_p` grid, indexed `[λ][η]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub lambda_grid: Vec<f64>,
    pub eta_grid: Vec<f64>,
    pub improvement: DMatrix<f64>,
    pub violation_p90: DMatrix<f64>,
    pub failures: usize,
}

/// Linear-interpolation percentile of a sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn sensitivity_sweep(cfg: &ExperimentConfig, lambda_grid: &[f64], eta_grid: &[f64]) -> Result<SweepResult> {
    if lambda_grid.is_empty() || eta_grid.is_empty() {
        return Err(Error::InvalidInput("sweep grids must be nonempty".into()));
    }
    let mut improvement = DMatrix::zeros(lambda_grid.len(), eta_grid.len());
    let mut violation = DMatrix::zeros(lambda_grid.len(), eta_grid.len());
    let mut failures = 0;
    for (i, &lambda_p) in lambda_grid.iter().enumerate() {
        for (j, &eta_p) in eta_grid.iter().enumerate() {
            let mut c = cfg.clone();
            c.train.lambda_p = lambda_p;
            c.train.eta_p = eta_p;
            let report = run_experiment(&c, None)?;
            failures += report.failures.len();
            improvement[(i, j)] = report.mean(|m| m.rel_f);
            let e: Vec<f64> = report.results.iter().map(|r| r.metrics.e_star).collect();
            violation[(i, j)] = percentile(&e, 0.9);
        }
    }
    Ok(SweepResult {
        lambda_grid: lambda_grid.to_vec(),
        eta_grid: eta_grid.to_vec(),
        improvement,
        violation_p90: violation,
        failures,
    })
}

impl SweepResult {
    /// Writes `improvement.csv` and `violation_p90.csv`: one row per `λ_p`,
    /// one column per `η_p`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, m) in [("improvement.csv", &self.improvement), ("violation_p90.csv", &self.violation_p90)] {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            let mut header = vec!["lambda_p".to_string()];
            header.extend(self.eta_grid.iter().map(|e| format!("eta_{}", fmt_f64(*e))));
            w.write_record(&header)?;
            for (i, l) in self.lambda_grid.iter().enumerate() {
                let mut row = vec![fmt_f64(*l)];
                row.extend((0..self.eta_grid.len()).map(|j| fmt_f64(m[(i, j)])));
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}
