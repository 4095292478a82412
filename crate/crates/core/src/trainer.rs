//! Hypergradient descent on the transport parameter `L`.
//!
//! Each iteration solves the lower-level conic program at the current `L`,
//! pulls `cᵀx*` back through the conic layer, adds the coverage penalty
//! gradient `2λ_p max{0, e} J_e`, clips entrywise, takes a step and
//! re-projects onto lower-triangular factors with a bounded spectrum.
//!
//! The two step schedules are `α_i = ᾱ` and `α_i = ᾱ / i`. The second is
//! square summable but not summable.

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic_diff::Differentiator;
use crate::conic_solver::{solve, solve_from, PrimalDualSolution, SolverSettings};
use crate::coverage::{
    bootstrap, calibrate_epsilon, replica_distances, BootstrapMode, CoverageModel, PenaltyConfig, PenaltyState,
    Reference,
};
use crate::dro_problems::{
    build_linreg_abs, build_linreg_sq, build_portfolio_gaussian, build_portfolio_type1, build_portfolio_type2,
    parameter_gradient, BuilderId, DatasetView, ProblemInstance,
};
use crate::error::{Error, Result};
use crate::linalg::{lower_triangle, spectral_map, sym_eigen, symmetrize};
use crate::scalar::Real;
use crate::transport_metrics::TransportParam;

/// Ridge used when the residual Jacobian is too ill-conditioned to factor.
const SINGULAR_RIDGE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    InverseIter,
}

pub fn step_size(schedule: Schedule, base: f64, i: usize) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::InverseIter => base / i.max(1) as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub step: f64,
    pub schedule: Schedule,
    pub tol: f64,
    pub lambda_p: f64,
    pub eta_p: f64,
    pub maxiter: usize,
    pub grad_clip: (f64, f64),
    pub eig_clip: (f64, f64),
    pub n_b: usize,
    pub beta: f64,
    /// CVaR tail level, used by the Gaussian portfolio only.
    pub gamma: f64,
    /// Fixed radius instead of bootstrap calibration.
    pub eps_override: Option<f64>,
    pub seed: u64,
    pub solver_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step: 1e-4,
            schedule: Schedule::Constant,
            tol: 1e-6,
            lambda_p: 10.0,
            eta_p: 100.0,
            maxiter: 1_000_000,
            grad_clip: (-1000.0, 1000.0),
            eig_clip: (1e-6, 1e6),
            n_b: 20,
            beta: 0.1,
            gamma: 0.05,
            eps_override: None,
            seed: 0,
            solver_tol: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidInput(format!("train config: {what}")));
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step must be positive");
        }
        if !(self.tol >= 0.0) {
            return bad("tol must be nonnegative");
        }
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return bad("lambda_p must be nonnegative");
        }
        if !(self.eta_p > 0.0 && self.eta_p.is_finite()) {
            return bad("eta_p must be positive");
        }
        if self.maxiter == 0 {
            return bad("maxiter must be at least 1");
        }
        if !(self.grad_clip.0 < self.grad_clip.1) {
            return bad("grad_clip must be an increasing pair");
        }
        if !(self.eig_clip.0 > 0.0 && self.eig_clip.0 <= self.eig_clip.1 && self.eig_clip.1.is_finite()) {
            return bad("eig_clip must satisfy 0 < lo <= hi");
        }
        if self.n_b == 0 {
            return bad("n_b must be at least 1");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if let Some(e) = self.eps_override {
            if !(e > 0.0 && e.is_finite()) {
                return bad("eps_override must be positive");
            }
        }
        if !(self.solver_tol > 0.0) {
            return bad("solver_tol must be positive");
        }
        Ok(())
    }

    fn penalty(&self, eps: f64) -> PenaltyConfig {
        PenaltyConfig {
            beta: self.beta,
            lambda_p: self.lambda_p,
            eta_p: self.eta_p,
            eps,
        }
    }
}

/// `M = L_raw L_rawᵀ` with eigenvalues clipped to `eig_clip`, refactored by
/// Cholesky.
pub fn project_param<T: Real>(l_raw: &DMatrix<T>, eig_clip: (f64, f64), p: u32) -> Result<TransportParam<T>> {
    Ok(project_with_flag(l_raw, eig_clip, p)?.0)
}

fn project_with_flag<T: Real>(l_raw: &DMatrix<T>, eig_clip: (f64, f64), p: u32) -> Result<(TransportParam<T>, bool)> {
    if l_raw.iter().any(|v| !v.is_finite_val()) {
        return Err(Error::NonFinite("L before projection"));
    }
    let (lo, hi) = (T::lit(eig_clip.0), T::lit(eig_clip.1));
    let m = symmetrize(&(l_raw * l_raw.transpose()));
    let (vals, vecs) = sym_eigen(&m);
    let clipped = vals.iter().any(|&v| v < lo || v > hi);
    let m = if clipped {
        symmetrize(&spectral_map(&vals, &vecs, |v| v.max(lo).min(hi)))
    } else {
        m
    };
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("clipped metric is not positive definite".into()))?;
    Ok((TransportParam::new(lower_triangle(&chol.l()), p)?, clipped))
}

/// One element of `J_φ` split into its two parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypergradient<T: Real> {
    pub total: DMatrix<T>,
    pub objective: DMatrix<T>,
    pub penalty: DMatrix<T>,
    /// The residual Jacobian needed the ridge fallback.
    pub singular: bool,
}

/// `J_φ = ∂f/∂L + 2λ_p max{0, e} J_e`.
///
/// `c` does not depend on `L` in any builder, so the `S(θ)ᵀJ_c` term is zero
/// and the objective part comes entirely from the adjoint of `cᵀx*`.
pub fn hypergradient<T: Real>(
    param: &TransportParam<T>,
    instance: &ProblemInstance<T>,
    solution: &PrimalDualSolution<T>,
    penalty: &PenaltyState<T>,
    lambda_p: f64,
) -> Result<Hypergradient<T>> {
    let problem = &instance.conic;
    let (diff, singular) = match Differentiator::new(solution, problem) {
        Ok(d) => (d, false),
        Err(Error::SingularJacobian { cond }) => {
            debug!("residual Jacobian condition {cond:.3e}; using ridge {SINGULAR_RIDGE:e}");
            (Differentiator::with_ridge(solution, problem, T::lit(SINGULAR_RIDGE))?, true)
        }
        Err(e) => return Err(e),
    };
    let m = problem.m();
    let slope = instance.reported_objective_slope(problem.objective(&solution.x));
    let adj = diff.adjoint(&(&problem.c * slope), &DVector::zeros(m), &DVector::zeros(m))?;
    let objective = parameter_gradient(instance, &adj, param)?;
    let gate = T::lit(2.0 * lambda_p) * penalty.e.max(T::zero());
    let penalty = &penalty.jacobian * gate;
    Ok(Hypergradient {
        total: &objective + &penalty,
        objective,
        penalty,
        singular,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub phi: f64,
    pub objective: f64,
    pub penalty: f64,
    pub e_theta: f64,
    pub grad_norm: f64,
    pub step: f64,
    /// `;`-separated flags: `clip`, `eig_clip`, `singular`, `cold_solve`.
    pub events: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct TrainTrace<T: Real> {
    pub records: Vec<TraceRecord>,
    pub theta: TransportParam<T>,
    /// Decision at `L = I`.
    pub w0: DVector<T>,
    pub w: DVector<T>,
    pub eps: T,
    pub stop: StopReason,
}

/// Fixed 17-significant-digit scientific format; parses back exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl<T: Real> TrainTrace<T> {
    pub fn final_record(&self) -> &TraceRecord {
        self.records.last().expect("trace has at least one record")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "phi", "objective", "penalty", "e_theta", "grad_norm", "step", "events"])?;
        for r in &self.records {
            w.write_record([
                r.iter.to_string(),
                fmt_f64(r.phi),
                fmt_f64(r.objective),
                fmt_f64(r.penalty),
                fmt_f64(r.e_theta),
                fmt_f64(r.grad_norm),
                fmt_f64(r.step),
                r.events.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv(path: &Path) -> Result<Vec<TraceRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<Vec<TraceRecord>, _>>()?)
    }
}

/// Everything the loop needs besides the iterate.
pub struct TrainSetup<T: Real> {
    pub builder: BuilderId,
    pub data: DatasetView<T>,
    pub coverage: CoverageModel<T>,
    pub eps: T,
    pub gamma: f64,
}

pub fn bootstrap_mode(builder: BuilderId) -> BootstrapMode {
    match builder {
        BuilderId::PortfolioGaussian => BootstrapMode::Gaussian,
        _ => BootstrapMode::Discrete,
    }
}

impl<T: Real> TrainSetup<T> {
    pub fn base(&self) -> &Reference<T> {
        &self.coverage.base
    }

    /// Bootstraps the data and calibrates `ε` at `L = I` (unless overridden).
    pub fn new(builder: BuilderId, data: DatasetView<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mode = bootstrap_mode(builder);
        let base = Reference::empirical(&data, mode)?;
        let boots = bootstrap(&data, cfg.n_b, mode, cfg.seed)?;
        let eps = match cfg.eps_override {
            Some(e) => T::lit(e),
            None => {
                let theta0 = TransportParam::identity(data.dim(), builder.order());
                calibrate_epsilon(&replica_distances(&theta0, &base, &boots)?, cfg.beta)?
            }
        };
        if !(eps > T::zero()) {
            return Err(Error::InvalidInput(
                "calibrated radius is zero (all replicas coincide with the data); set eps_override".into(),
            ));
        }
        Ok(TrainSetup {
            builder,
            data,
            coverage: CoverageModel::new(base, boots)?,
            eps,
            gamma: cfg.gamma,
        })
    }

    pub fn build(&self, param: &TransportParam<T>) -> Result<ProblemInstance<T>> {
        build_instance(self.builder, &self.data, &self.coverage.base, self.eps, self.gamma, param)
    }
}

/// Dispatches to the builder; the Gaussian portfolio reads its moments from
/// `base`.
pub fn build_instance<T: Real>(
    builder: BuilderId,
    data: &DatasetView<T>,
    base: &Reference<T>,
    eps: T,
    gamma: f64,
    param: &TransportParam<T>,
) -> Result<ProblemInstance<T>> {
    match builder {
        BuilderId::PortfolioT1 => build_portfolio_type1(data, eps, param),
        BuilderId::PortfolioT2 => build_portfolio_type2(data, eps, param),
        BuilderId::PortfolioGaussian => match base {
            Reference::Gaussian(m) => build_portfolio_gaussian(m, eps, gamma, param),
            Reference::Discrete(_) => Err(Error::InvalidInput("Gaussian portfolio needs a moment reference".into())),
        },
        BuilderId::RegressionAbs => build_linreg_abs(data, eps, param),
        BuilderId::RegressionSq => build_linreg_sq(data, eps, param),
    }
}

/// State of one evaluated iterate.
struct Evaluated<T: Real> {
    param: TransportParam<T>,
    instance: ProblemInstance<T>,
    solution: PrimalDualSolution<T>,
    penalty: PenaltyState<T>,
    objective: T,
    phi: T,
    cold: bool,
}

fn evaluate<T: Real>(
    setup: &TrainSetup<T>,
    cfg: &TrainConfig,
    param: TransportParam<T>,
    previous: Option<(&ProblemInstance<T>, &PrimalDualSolution<T>)>,
    iter: usize,
) -> Result<Evaluated<T>> {
    let settings = SolverSettings {
        tol: T::lit(cfg.solver_tol),
        ..SolverSettings::default()
    };
    let (instance, solution, cold) = match previous {
        Some((inst, prev)) => {
            let mut instance = inst.clone();
            instance.set_l(param.l())?;
            let sol = solve_from(&instance.conic, &settings, prev)?;
            let cold = sol.iterations > 0;
            (instance, sol, cold)
        }
        None => {
            let instance = setup.build(&param)?;
            let sol = solve(&instance.conic, &settings)?;
            (instance, sol, true)
        }
    };
    let solution = solution.require_optimal().map_err(|e| Error::Training {
        iter,
        reason: format!("lower-level solve failed: {e}"),
    })?;
    let penalty = setup.coverage.gated_state(&param, &cfg.penalty(setup.eps.as_f64()))?;
    let objective = instance.reported_objective(instance.conic.objective(&solution.x));
    let violation = penalty.e.max(T::zero());
    let phi = objective + T::lit(cfg.lambda_p) * violation * violation;
    if !phi.is_finite_val() {
        return Err(Error::Training {
            iter,
            reason: format!(
                "non-finite upper objective (objective {}, e {})",
                objective.as_f64(),
                penalty.e.as_f64()
            ),
        });
    }
    Ok(Evaluated {
        param,
        instance,
        solution,
        penalty,
        objective,
        phi,
        cold,
    })
}

/// Runs the descent loop from `L = I`.
pub fn train<T: Real>(builder: BuilderId, data: &DatasetView<T>, cfg: &TrainConfig) -> Result<TrainTrace<T>> {
    let setup = TrainSetup::new(builder, data.clone(), cfg)?;
    train_with(&setup, cfg)
}

/// Runs the descent loop on a prepared setup.
pub fn train_with<T: Real>(setup: &TrainSetup<T>, cfg: &TrainConfig) -> Result<TrainTrace<T>> {
    cfg.validate()?;
    let d = setup.data.dim();
    let theta0 = TransportParam::identity(d, setup.builder.order());
    let mut cur = evaluate(setup, cfg, theta0, None, 0)?;
    let w0 = cur.instance.decision(&cur.solution.x);
    let mut records = Vec::new();
    let (lo, hi) = (T::lit(cfg.grad_clip.0), T::lit(cfg.grad_clip.1));
    let mut stop = StopReason::MaxIter;
    let mut pending_events: Vec<&'static str> = Vec::new();

    for i in 0..cfg.maxiter {
        let hg = hypergradient(&cur.param, &cur.instance, &cur.solution, &cur.penalty, cfg.lambda_p)?;
        let mut events = std::mem::take(&mut pending_events);
        if hg.singular {
            events.push("singular");
        }
        let mut grad = hg.total;
        if grad.iter().any(|g| *g < lo || *g > hi) {
            events.push("clip");
            grad.apply(|g| *g = g.max(lo).min(hi));
        }
        let alpha = step_size(cfg.schedule, cfg.step, i + 1);
        let penalty_part = cur.phi - cur.objective;
        records.push(TraceRecord {
            iter: i,
            phi: cur.phi.as_f64(),
            objective: cur.objective.as_f64(),
            penalty: penalty_part.as_f64(),
            e_theta: cur.penalty.e.as_f64(),
            grad_norm: grad.norm().as_f64(),
            step: alpha,
            events: events.join(";"),
        });

        let raw = cur.param.l() - &grad * T::lit(alpha);
        let (param, eig_clipped) = project_with_flag(&raw, cfg.eig_clip, setup.builder.order())?;
        let next = evaluate(setup, cfg, param, Some((&cur.instance, &cur.solution)), i + 1)?;
        let denom = cur.phi.abs().max(T::lit(1e-12));
        let rel = ((cur.phi - next.phi) / denom).as_f64();
        if !(rel >= cfg.tol) {
            // The trial step is not committed, so φ never increases along the trace.
            stop = StopReason::Converged;
            break;
        }
        if eig_clipped {
            pending_events.push("eig_clip");
        }
        if next.cold {
            pending_events.push("cold_solve");
        }
        cur = next;
    }
    if stop == StopReason::MaxIter {
        let hg = hypergradient(&cur.param, &cur.instance, &cur.solution, &cur.penalty, cfg.lambda_p)?;
        let grad = hg.total.map(|g| g.max(lo).min(hi));
        records.push(TraceRecord {
            iter: cfg.maxiter,
            phi: cur.phi.as_f64(),
            objective: cur.objective.as_f64(),
            penalty: (cur.phi - cur.objective).as_f64(),
            e_theta: cur.penalty.e.as_f64(),
            grad_norm: grad.norm().as_f64(),
            step: 0.0,
            events: pending_events.join(";"),
        });
    }
    info!(
        "training stopped ({stop:?}) after {} iterations, phi {:.6e}",
        records.len(),
        cur.phi.as_f64()
    );
    let w = cur.instance.decision(&cur.solution.x);
    Ok(TrainTrace {
        records,
        theta: cur.param,
        w0,
        w,
        eps: setup.eps,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn returns(j: usize, k: usize, seed: u64) -> DatasetView<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let drift: Vec<f64> = (0..k).map(|_| rng.random_range(-0.2..0.2)).collect();
        let scale: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..0.5)).collect();
        DatasetView::new(DMatrix::from_fn(j, k, |_, c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            drift[c] + scale[c] * z
        }))
        .unwrap()
    }

    fn regression(j: usize, seed: u64) -> DatasetView<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(j, 1, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(j, |i, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.7 * x[(i, 0)] + 0.3 * z
        });
        DatasetView::from_regression(&x, &y).unwrap()
    }

    #[test]
    fn defaults_match_table() {
        let c = TrainConfig::default();
        assert_eq!(c.step, 1e-4);
        assert_eq!(c.tol, 1e-6);
        assert_eq!(c.lambda_p, 10.0);
        assert_eq!(c.eta_p, 100.0);
        assert_eq!(c.maxiter, 1_000_000);
        assert_eq!(c.grad_clip, (-1000.0, 1000.0));
        assert_eq!(c.eig_clip, (1e-6, 1e6));
    }

    #[test]
    fn schedules() {
        assert_eq!(step_size(Schedule::Constant, 0.3, 17), 0.3);
        assert_relative_eq!(step_size(Schedule::InverseIter, 0.3, 10), 0.03);
    }

    #[test]
    fn projection_keeps_valid_factor() {
        let l = DMatrix::from_row_slice(2, 2, &[1.5, 0.0, -0.4, 0.7]);
        let p = project_param(&l, (1e-6, 1e6), 2).unwrap();
        assert_relative_eq!(*p.l(), l, epsilon = 1e-10);
    }

    #[test]
    fn projection_clips_tiny_spectrum() {
        let l = DMatrix::identity(3, 3) * 1e-9;
        let p = project_param(&l, (1e-6, 1e6), 1).unwrap();
        assert_relative_eq!(*p.l(), DMatrix::identity(3, 3) * 1e-3, epsilon = 1e-15);
    }

    #[test]
    fn projection_fixes_negative_diagonal_and_bounds_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let l = lower_triangle(&DMatrix::from_fn(3, 3, |_, _| rng.random_range(-5.0..5.0)));
            let p = project_param(&l, (0.1, 10.0), 2).unwrap();
            let (vals, _) = sym_eigen(&p.metric());
            assert!(vals.iter().all(|&v| v >= 0.1 - 1e-9 && v <= 10.0 + 1e-9), "{vals}");
        }
        assert!(project_param(&DMatrix::from_element(1, 1, f64::NAN), (0.1, 1.0), 1).is_err());
    }

    #[test]
    fn infinite_tolerance_stops_after_one_record() {
        let cfg = TrainConfig {
            tol: f64::INFINITY,
            ..TrainConfig::default()
        };
        let trace = train(BuilderId::PortfolioGaussian, &returns(30, 3, 2), &cfg).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.stop, StopReason::Converged);
        assert_eq!(*trace.theta.l(), DMatrix::identity(3, 3));
    }

    #[test]
    fn gaussian_training_decreases_phi() {
        let cfg = TrainConfig {
            step: 1e-2,
            maxiter: 300,
            ..TrainConfig::default()
        };
        let trace = train(BuilderId::PortfolioGaussian, &returns(30, 3, 3), &cfg).unwrap();
        assert!(trace.records.len() > 1 && trace.records.len() <= 301);
        let phis: Vec<f64> = trace.records.iter().map(|r| r.phi).collect();
        assert!(phis.windows(2).all(|w| w[1] <= w[0] + 1e-6));
        assert!(phis.last().unwrap() < &phis[0]);
        assert_relative_eq!(trace.w.sum(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn maxiter_records_final_iterate() {
        let cfg = TrainConfig {
            step: 1e-2,
            tol: 0.0,
            maxiter: 3,
            ..TrainConfig::default()
        };
        let trace = train(BuilderId::PortfolioGaussian, &returns(30, 2, 11), &cfg).unwrap();
        assert_eq!(trace.stop, StopReason::MaxIter);
        assert_eq!(trace.records.len(), 4);
        assert_eq!(trace.final_record().iter, 3);
        assert_ne!(trace.w0, trace.w);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            step: 1e-2,
            maxiter: 40,
            ..TrainConfig::default()
        };
        let data = regression(20, 4);
        let a = train(BuilderId::RegressionAbs, &data, &cfg).unwrap();
        let b = train(BuilderId::RegressionAbs, &data, &cfg).unwrap();
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.theta, b.theta);
    }

    fn phi_at(setup: &TrainSetup<f64>, cfg: &TrainConfig, l: DMatrix<f64>) -> f64 {
        let param = TransportParam::new(l, setup.builder.order()).unwrap();
        evaluate(setup, cfg, param, None, 0).unwrap().phi.as_f64()
    }

    fn fd_hypergradient(builder: BuilderId, data: DatasetView<f64>, l: DMatrix<f64>, eps_scale: f64) {
        let base_cfg = TrainConfig {
            eta_p: 5.0,
            solver_tol: 1e-11,
            ..TrainConfig::default()
        };
        let setup0 = TrainSetup::new(builder, data.clone(), &base_cfg).unwrap();
        // Shrink the radius so the penalty is active and both terms contribute.
        let cfg = TrainConfig {
            eps_override: Some(setup0.eps * eps_scale),
            ..base_cfg
        };
        let setup = TrainSetup::new(builder, data, &cfg).unwrap();
        let param = TransportParam::new(l.clone(), builder.order()).unwrap();
        let ev = evaluate(&setup, &cfg, param.clone(), None, 0).unwrap();
        assert!(ev.penalty.e > 0.0, "penalty inactive: e = {}", ev.penalty.e);
        let hg = hypergradient(&param, &ev.instance, &ev.solution, &ev.penalty, cfg.lambda_p).unwrap();
        let d = l.nrows();
        let h = 1e-5;
        let mut fd = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                let mut lp = l.clone();
                lp[(i, j)] += h;
                let mut lm = l.clone();
                lm[(i, j)] -= h;
                fd[(i, j)] = (phi_at(&setup, &cfg, lp) - phi_at(&setup, &cfg, lm)) / (2.0 * h);
            }
        }
        let err = (&hg.total - &fd).norm() / fd.norm();
        assert!(err <= 1e-3, "{builder:?}: {err:.3e}\n{}{fd}", hg.total);
    }

    #[test]
    fn hypergradient_matches_finite_differences() {
        let l2 = DMatrix::from_row_slice(2, 2, &[1.1, 0.0, 0.2, 0.9]);
        fd_hypergradient(BuilderId::PortfolioGaussian, returns(30, 2, 5), l2.clone(), 0.7);
        fd_hypergradient(BuilderId::RegressionSq, regression(15, 6), l2.clone(), 0.7);
        fd_hypergradient(BuilderId::RegressionAbs, regression(15, 7), l2, 0.7);
    }

    #[test]
    fn inactive_penalty_leaves_objective_gradient() {
        let data = returns(30, 2, 8);
        let cfg = TrainConfig {
            eps_override: Some(1e3),
            ..TrainConfig::default()
        };
        let setup = TrainSetup::new(BuilderId::PortfolioGaussian, data, &cfg).unwrap();
        let ev = evaluate(&setup, &cfg, TransportParam::identity(2, 2), None, 0).unwrap();
        assert!(ev.penalty.e <= 0.0);
        let hg = hypergradient(&ev.param, &ev.instance, &ev.solution, &ev.penalty, cfg.lambda_p).unwrap();
        assert_eq!(hg.penalty, DMatrix::zeros(2, 2));
        assert_eq!(hg.total, hg.objective);
    }

    #[test]
    fn trace_csv_round_trips() {
        let cfg = TrainConfig {
            step: 1e-2,
            maxiter: 5,
            ..TrainConfig::default()
        };
        let trace = train(BuilderId::PortfolioGaussian, &returns(20, 2, 9), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        trace.save_csv(&path).unwrap();
        let back = TrainTrace::<f64>::read_csv(&path).unwrap();
        assert_eq!(back, trace.records);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iter,phi,objective,penalty,e_theta,grad_norm,step,events\n"));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let data = returns(10, 2, 1);
        for cfg in [
            TrainConfig { step: 0.0, ..TrainConfig::default() },
            TrainConfig { beta: 1.0, ..TrainConfig::default() },
            TrainConfig { n_b: 0, ..TrainConfig::default() },
            TrainConfig { eig_clip: (1.0, 0.5), ..TrainConfig::default() },
            TrainConfig { grad_clip: (1.0, -1.0), ..TrainConfig::default() },
        ] {
            assert!(train(BuilderId::PortfolioGaussian, &data, &cfg).is_err());
        }
    }
}
