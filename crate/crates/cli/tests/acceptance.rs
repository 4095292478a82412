//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use otdro::conic_diff::Differentiator;
use otdro::conic_solver::{kkt_residuals, solve, SolverSettings};
use otdro::coverage::PenaltyState;
use otdro::dro_problems::{
    build_linreg_abs, build_linreg_sq, build_portfolio_gaussian, build_portfolio_type1, build_portfolio_type2,
    closed_form_gaussian_objective, closed_form_linreg_abs, closed_form_linreg_sq, nominal_gaussian_cvar,
    worst_case_moments, DatasetView, ProblemInstance,
};
use otdro::experiments::{run_experiment, ExperimentConfig, ExperimentReport, Family};
use otdro::trainer::hypergradient;
use otdro::transport_lp::solve_transport;
use otdro::transport_metrics::{
    discrete_distance, discrete_distance_gradient, gelbrich_distance, gelbrich_gradient, DiscreteDistribution,
    GaussianMoments, TransportParam,
};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let t = start.elapsed();
    check(t < budget, || format!("runtime {t:.1?} exceeds {budget:?}"))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn m2(a: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, a)
}

fn random_l(rng: &mut ChaCha8Rng, d: usize, p: u32) -> TransportParam<f64> {
    let l = DMatrix::from_fn(d, d, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => rng.random_range(0.5..1.5),
        std::cmp::Ordering::Greater => rng.random_range(-0.4..0.4),
        std::cmp::Ordering::Less => 0.0,
    });
    TransportParam::new(l, p).unwrap()
}

fn returns(rng: &mut ChaCha8Rng, j: usize, k: usize) -> DatasetView<f64> {
    let drift: Vec<f64> = (0..k).map(|_| rng.random_range(-0.3..0.3)).collect();
    let vol: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    DatasetView::new(DMatrix::from_fn(j, k, |_, c| drift[c] + vol[c] * normal(rng))).unwrap()
}

fn regression(rng: &mut ChaCha8Rng, j: usize, d: usize) -> DatasetView<f64> {
    let w = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
    let x = DMatrix::from_fn(j, d, |_, _| normal(rng));
    let y = &x * &w + DVector::from_fn(j, |_, _| 0.5 * normal(rng));
    DatasetView::from_regression(&x, &y).unwrap()
}

fn moments(rng: &mut ChaCha8Rng, k: usize) -> GaussianMoments<f64> {
    let mean = DVector::from_fn(k, |_, _| rng.random_range(-0.3..0.3));
    let f = DMatrix::from_fn(k, k, |_, _| rng.random_range(-0.5..0.5));
    GaussianMoments::new(mean, &f * f.transpose() + DMatrix::identity(k, k) * 0.05).unwrap()
}

#[derive(Clone, Copy, Debug)]
enum Fam {
    Type1,
    Type2,
    Gaussian,
    Abs,
    Sq,
}

const FAMILIES: [Fam; 5] = [Fam::Type1, Fam::Type2, Fam::Gaussian, Fam::Abs, Fam::Sq];

/// A random instance of the family, rebuildable at any `L` of the right shape.
struct Case {
    fam: Fam,
    data: Option<DatasetView<f64>>,
    mom: Option<GaussianMoments<f64>>,
    eps: f64,
    gamma: f64,
    param: TransportParam<f64>,
}

impl Case {
    fn random(fam: Fam, rng: &mut ChaCha8Rng, max_k: usize, max_j: usize) -> Case {
        let k = rng.random_range(2..=max_k);
        let j = rng.random_range(5..=max_j);
        let eps = rng.random_range(0.01..0.5);
        let gamma = rng.random_range(0.05..0.3);
        let (data, mom, d, p) = match fam {
            Fam::Type1 => (Some(returns(rng, j, k)), None, k, 1),
            Fam::Type2 => (Some(returns(rng, j, k)), None, k, 2),
            Fam::Gaussian => (None, Some(moments(rng, k)), k, 2),
            Fam::Abs => (Some(regression(rng, j, k - 1)), None, k, 1),
            Fam::Sq => (Some(regression(rng, j, k - 1)), None, k, 2),
        };
        let param = random_l(rng, d, p);
        Case {
            fam,
            data,
            mom,
            eps,
            gamma,
            param,
        }
    }

    fn build(&self, param: &TransportParam<f64>) -> ProblemInstance<f64> {
        let data = self.data.as_ref();
        match self.fam {
            Fam::Type1 => build_portfolio_type1(data.unwrap(), self.eps, param),
            Fam::Type2 => build_portfolio_type2(data.unwrap(), self.eps, param),
            Fam::Gaussian => build_portfolio_gaussian(self.mom.as_ref().unwrap(), self.eps, self.gamma, param),
            Fam::Abs => build_linreg_abs(data.unwrap(), self.eps, param),
            Fam::Sq => build_linreg_sq(data.unwrap(), self.eps, param),
        }
        .unwrap()
    }
}

fn settings(tol: f64) -> SolverSettings<f64> {
    SolverSettings {
        tol,
        ..SolverSettings::default()
    }
}

fn reported_value(case: &Case, param: &TransportParam<f64>) -> Result<f64, String> {
    let inst = case.build(param);
    let sol = solve(&inst.conic, &settings(1e-10)).map_err(|e| e.to_string())?;
    check(sol.is_optimal(), || format!("{:?}: status {:?}", case.fam, sol.status))?;
    Ok(inst.reported_objective(inst.conic.objective(&sol.x)))
}

// Criterion 1.

fn golden() -> Outcome {
    let start = Instant::now();
    let disc = |pts: &[f64], w: &[f64]| {
        DiscreteDistribution::new(DMatrix::from_row_slice(2, 2, pts), DVector::from_row_slice(w)).unwrap()
    };
    let gauss = |mean: &[f64], cov: &[f64]| GaussianMoments::new(DVector::from_row_slice(mean), m2(cov)).unwrap();
    let triple = |l1: DMatrix<f64>, l2: DMatrix<f64>, f: &dyn Fn(DMatrix<f64>) -> f64| {
        let mid = (&l1 + &l2) * 0.5;
        [f(l1), f(l2), f(mid)]
    };

    let (p1, q1) = (disc(&[0.7, 0.4, 1.7, 1.0], &[0.4, 0.6]), disc(&[1.8, 0.1, 0.5, 1.4], &[0.5, 0.5]));
    let d1 = triple(m2(&[1.0, 0.0, 0.5, 0.5]), m2(&[0.5, 0.0, 1.0, 1.0]), &|l| {
        discrete_distance(&p1, &q1, &TransportParam::new(l, 1).unwrap()).unwrap()
    });
    let (p2, q2) = (disc(&[1.2, 1.9, 0.1, 0.1], &[0.6, 0.4]), disc(&[0.2, 1.4, 1.4, 0.3], &[0.6, 0.4]));
    let d2 = triple(m2(&[1.0, 0.0, 0.5, 0.5]), m2(&[0.5, 0.0, 1.0, 0.5]), &|l| {
        discrete_distance(&p2, &q2, &TransportParam::new(l, 2).unwrap()).unwrap()
    });
    let (gp, gq) = (gauss(&[1.0, 0.6], &[0.1, 0.0, 0.0, 1.0]), gauss(&[0.8, 0.6], &[10.0, 0.0, 0.0, 1.0]));
    let g = triple(m2(&[0.2, 0.0, 0.2, 1.9]), m2(&[0.6, 0.0, 0.8, 0.5]), &|l| {
        gelbrich_distance(&gp, &gq, &TransportParam::new(l, 2).unwrap()).unwrap()
    });
    let (sp, sq) = (gauss(&[0.4, 0.6], &[0.1, 0.0, 0.0, 1.0]), gauss(&[0.4, 0.4], &[10.0, 0.0, 0.0, 1.0]));
    let g2 = triple(m2(&[0.7, 0.0, 0.4, 1.9]), m2(&[0.9, 0.0, 0.9, 0.6]), &|l| {
        gelbrich_distance(&sp, &sq, &TransportParam::new(l, 2).unwrap()).unwrap().powi(2)
    });

    let cases = [
        ("d1", d1, [0.6203, 0.5036, 0.6820]),
        ("d2", d2, [1.0578, 0.9646, 1.1433]),
        ("g", g, [0.5675, 1.3142, 1.0636]),
        ("g^2", g2, [3.9720, 4.4900, 4.4865]),
    ];
    let mut worst = 0.0f64;
    for (name, got, want) in cases {
        for (a, b) in got.iter().zip(want) {
            worst = worst.max((a - b).abs());
            check((a - b).abs() <= 5e-4, || format!("{name}: {got:?} vs {want:?}"))?;
        }
        check(got[2] > 0.5 * (got[0] + got[1]), || format!("{name}: midpoint not above chord"))?;
    }
    within_budget(start, Duration::from_secs(5))?;
    Ok(format!("max deviation {worst:.1e}"))
}

// Criterion 2.

/// Minimum over all basic feasible solutions of the transportation polytope.
fn brute_force_transport(cost: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let (ns, nd) = cost.shape();
    let cells: Vec<(usize, usize)> = (0..ns).flat_map(|i| (0..nd).map(move |j| (i, j))).collect();
    let r = ns + nd - 1;
    let rhs = DVector::from_iterator(ns + nd, a.iter().chain(b.iter()).copied());
    let mut best = f64::INFINITY;
    let mut pick: Vec<usize> = (0..r).collect();
    loop {
        let mat = DMatrix::from_fn(ns + nd, r, |row, col| {
            let (i, j) = cells[pick[col]];
            f64::from(u8::from(row == i || row == ns + j))
        });
        let svd = mat.clone().svd(true, true);
        if svd.rank(1e-9) == r {
            let x = svd.solve(&rhs, 1e-12).unwrap();
            let feasible = (&mat * &x - &rhs).amax() < 1e-10 && x.iter().all(|&v| v >= -1e-12);
            if feasible {
                let v: f64 = pick.iter().zip(x.iter()).map(|(&c, &f)| cost[cells[c]] * f).sum();
                best = best.min(v);
            }
        }
        // Next r-subset in lexicographic order.
        let n = cells.len();
        let mut i = r;
        while i > 0 && pick[i - 1] == n - r + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return best;
        }
        pick[i - 1] += 1;
        for t in i..r {
            pick[t] = pick[t - 1] + 1;
        }
    }
}

fn solver_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for fam in FAMILIES {
        for _ in 0..100 {
            let case = Case::random(fam, &mut rng, 5, 50);
            let inst = case.build(&case.param);
            let sol = solve(&inst.conic, &settings(1e-9)).map_err(|e| format!("{fam:?}: {e}"))?;
            check(sol.is_optimal(), || format!("{fam:?}: status {:?}", sol.status))?;
            let kkt = kkt_residuals(&inst.conic, &sol).map_err(|e| e.to_string())?;
            let dual_gap = (inst.conic.c.dot(&sol.x) + inst.conic.b.dot(&sol.y)).abs();
            let r = kkt.primal.max(kkt.dual).max(kkt.gap).max(dual_gap);
            worst = worst.max(r);
            check(r <= 1e-7, || format!("{fam:?}: residuals {kkt:?}, gap {dual_gap:.2e}"))?;
        }
    }
    let mut lp_worst = 0.0f64;
    for _ in 0..100 {
        let ns = rng.random_range(1..=4);
        let nd = rng.random_range(1..=4);
        let cost = DMatrix::from_fn(ns, nd, |_, _| rng.random_range(0.0..5.0));
        let mut a = DVector::from_fn(ns, |_, _| rng.random_range(0.1..1.0));
        let mut b = DVector::from_fn(nd, |_, _| rng.random_range(0.1..1.0));
        a /= a.sum();
        b /= b.sum();
        let simplex = solve_transport(&cost, &a, &b).map_err(|e| e.to_string())?.value;
        let brute = brute_force_transport(&cost, &a, &b);
        lp_worst = lp_worst.max((simplex - brute).abs());
        check((simplex - brute).abs() <= 1e-7, || format!("transport {simplex} vs brute force {brute}"))?;
    }
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!("max KKT residual {worst:.1e}, max transport LP deviation {lp_worst:.1e}"))
}

// Criterion 3.

fn closed_forms() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for fam in [Fam::Gaussian, Fam::Abs, Fam::Sq] {
        for _ in 0..20 {
            let case = Case::random(fam, &mut rng, 5, 50);
            let inst = case.build(&case.param);
            let sol = solve(&inst.conic, &settings(1e-10)).map_err(|e| e.to_string())?;
            check(sol.is_optimal(), || format!("{fam:?}: status {:?}", sol.status))?;
            let conic = inst.reported_objective(inst.conic.objective(&sol.x));
            let w = inst.decision(&sol.x);
            let formula = |w: &DVector<f64>| -> f64 {
                match fam {
                    Fam::Gaussian => closed_form_gaussian_objective(w, case.mom.as_ref().unwrap(), case.eps, case.gamma, &case.param),
                    Fam::Abs => closed_form_linreg_abs(w, case.data.as_ref().unwrap(), case.eps, &case.param),
                    _ => closed_form_linreg_sq(w, case.data.as_ref().unwrap(), case.eps, &case.param),
                }
                .unwrap()
            };
            let closed = formula(&w);
            let rel = (conic - closed).abs() / closed.abs().max(1e-12);
            worst = worst.max(rel);
            check(rel <= 1e-6, || format!("{fam:?}: conic {conic} vs closed form {closed}"))?;
            // The conic decision also minimizes the formula against random competitors.
            for _ in 0..20 {
                let other = match fam {
                    Fam::Gaussian => {
                        let mut v = DVector::from_fn(w.len(), |_, _| rng.random_range(0.0..1.0));
                        v /= v.sum();
                        v
                    }
                    _ => &w + DVector::from_fn(w.len(), |_, _| 0.3 * normal(&mut rng)),
                };
                let v = formula(&other);
                check(v >= closed - 1e-7 * closed.abs().max(1.0), || format!("{fam:?}: {v} < optimum {closed}"))?;
            }
        }
    }
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!("max relative error {worst:.1e}"))
}

// Criterion 4.

fn fd_lower(f: &dyn Fn(&DMatrix<f64>) -> Result<f64, String>, l: &DMatrix<f64>, h: f64) -> Result<(DMatrix<f64>, f64), String> {
    let d = l.nrows();
    let mut central = DMatrix::zeros(d, d);
    let mut one_sided_gap = 0.0f64;
    let f0 = f(l)?;
    for i in 0..d {
        for j in 0..=i {
            let mut lp = l.clone();
            lp[(i, j)] += h;
            let mut lm = l.clone();
            lm[(i, j)] -= h;
            let (vp, vm) = (f(&lp)?, f(&lm)?);
            central[(i, j)] = (vp - vm) / (2.0 * h);
            let fwd = (vp - f0) / h;
            let bwd = (f0 - vm) / h;
            one_sided_gap = one_sided_gap.max((fwd - bwd).abs());
        }
    }
    Ok((central, one_sided_gap))
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-8)
}

fn differentiation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let mut ip_worst = 0.0f64;
    for seed in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let case = Case::random(FAMILIES[seed as usize % 5], &mut r, 4, 20);
        let inst = case.build(&case.param);
        let sol = solve(&inst.conic, &settings(1e-10)).map_err(|e| e.to_string())?.require_optimal().map_err(|e| e.to_string())?;
        let diff = Differentiator::new(&sol, &inst.conic)
            .or_else(|_| Differentiator::with_ridge(&sol, &inst.conic, 1e-10))
            .map_err(|e| e.to_string())?;
        let (n, m) = (inst.conic.n(), inst.conic.m());
        let da = DMatrix::from_fn(m, n, |_, _| normal(&mut r));
        let db = DVector::from_fn(m, |_, _| normal(&mut r));
        let dc = DVector::from_fn(n, |_, _| normal(&mut r));
        let gx = DVector::from_fn(n, |_, _| normal(&mut r));
        let gy = DVector::from_fn(m, |_, _| normal(&mut r));
        let gs = DVector::from_fn(m, |_, _| normal(&mut r));
        let (dx, dy, ds) = diff.forward(&da, &db, &dc).map_err(|e| e.to_string())?;
        let back = diff.adjoint(&gx, &gy, &gs).map_err(|e| e.to_string())?;
        let lhs = gx.dot(&dx) + gy.dot(&dy) + gs.dot(&ds);
        let rhs = back.da.dot(&da) + back.db.dot(&db) + back.dc.dot(&dc);
        let err = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);
        ip_worst = ip_worst.max(err);
        check(err <= 1e-8, || format!("seed {seed} {:?}: <g, Jv> {lhs} vs <J'g, v> {rhs}", case.fam))?;
    }

    let mut hg_worst = 0.0f64;
    for fam in FAMILIES {
        let mut accepted = 0;
        let mut tried = 0;
        while accepted < 20 {
            tried += 1;
            check(tried <= 100, || format!("{fam:?}: too few smooth points"))?;
            let case = Case::random(fam, &mut rng, 3, 15);
            let value = |l: &DMatrix<f64>| reported_value(&case, &case.param.with_l(l.clone()).map_err(|e| e.to_string())?);
            let (fd, gap) = fd_lower(&value, case.param.l(), 1e-5)?;
            // Skip points where the two one-sided quotients disagree (a kink
            // within one step).
            if gap > 1e-3 * fd.norm().max(1e-6) {
                continue;
            }
            let inst = case.build(&case.param);
            let sol = solve(&inst.conic, &settings(1e-10)).map_err(|e| e.to_string())?;
            let d = case.param.dim();
            let off = PenaltyState {
                e: 0.0,
                jacobian: DMatrix::zeros(d, d),
                distances: Vec::new(),
            };
            let hg = hypergradient(&case.param, &inst, &sol, &off, 0.0).map_err(|e| e.to_string())?;
            let err = rel_err(&hg.total, &fd);
            hg_worst = hg_worst.max(err);
            check(err <= 1e-3, || format!("{fam:?}: hypergradient error {err:.2e}\n{}{fd}", hg.total))?;
            accepted += 1;
        }
    }

    let mut dg_worst = 0.0f64;
    for kind in 0..3 {
        for _ in 0..20 {
            let d = rng.random_range(2..=3);
            let (p, q) = (rng.random_range(2..6), rng.random_range(2..6));
            let atoms = |rng: &mut ChaCha8Rng, n: usize| {
                let mut w = DVector::from_fn(n, |_, _| rng.random_range(0.2..1.0));
                w /= w.sum();
                DiscreteDistribution::new(DMatrix::from_fn(n, d, |_, _| normal(rng)), w).unwrap()
            };
            let (grad, fd) = match kind {
                0 | 1 => {
                    let order = kind as u32 + 1;
                    let (a, b) = (atoms(&mut rng, p), atoms(&mut rng, q));
                    let param = random_l(&mut rng, d, order);
                    let f = |l: &DMatrix<f64>| Ok(discrete_distance(&a, &b, &TransportParam::new(l.clone(), order).unwrap()).unwrap());
                    let (fd, _) = fd_lower(&f, param.l(), 1e-6)?;
                    (discrete_distance_gradient(&a, &b, &param).map_err(|e| e.to_string())?, fd)
                }
                _ => {
                    let (a, b) = (moments(&mut rng, d), moments(&mut rng, d));
                    let param = random_l(&mut rng, d, 2);
                    let f = |l: &DMatrix<f64>| Ok(gelbrich_distance(&a, &b, &TransportParam::new(l.clone(), 2).unwrap()).unwrap());
                    let (fd, _) = fd_lower(&f, param.l(), 1e-6)?;
                    (gelbrich_gradient(&a, &b, &param).map_err(|e| e.to_string())?, fd)
                }
            };
            let err = rel_err(&grad, &fd);
            dg_worst = dg_worst.max(err);
            check(err <= 1e-4, || format!("distance kind {kind}: gradient error {err:.2e}"))?;
        }
    }
    within_budget(start, Duration::from_secs(120))?;
    Ok(format!(
        "inner product {ip_worst:.1e}, hypergradient {hg_worst:.1e}, distance gradients {dg_worst:.1e}"
    ))
}

// Criterion 5.

fn saturation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut dist_worst, mut obj_worst) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let k = rng.random_range(2..=5);
        let mom = moments(&mut rng, k);
        let param = random_l(&mut rng, k, 2);
        let rho = rng.random_range(0.01..1.0);
        let gamma = rng.random_range(0.01..0.5);
        let mut w = DVector::from_fn(k, |_, _| rng.random_range(0.0..1.0));
        w /= w.sum();
        let worst = worst_case_moments(&w, &mom, rho, gamma, &param).map_err(|e| e.to_string())?;
        let dist = gelbrich_distance(&mom, &worst, &param).map_err(|e| e.to_string())?;
        let attained = nominal_gaussian_cvar(&w, &worst, gamma).map_err(|e| e.to_string())?;
        let closed = closed_form_gaussian_objective(&w, &mom, rho, gamma, &param).map_err(|e| e.to_string())?;
        dist_worst = dist_worst.max((dist - rho).abs());
        obj_worst = obj_worst.max((attained - closed).abs());
        check((dist - rho).abs() <= 1e-5, || format!("distance {dist} vs radius {rho}"))?;
        check((attained - closed).abs() <= 1e-5, || format!("CVaR {attained} vs closed form {closed}"))?;
    }
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!("distance {dist_worst:.1e}, objective {obj_worst:.1e}"))
}

// Criterion 6.

fn all_results(report: &ExperimentReport, what: &str) -> Result<(), String> {
    check(report.failures.is_empty(), || format!("{what}: failed trials {:?}", report.failures))
}

fn training_behavior() -> Outcome {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(Family::PortfolioGaussian, 3, 30);
    cfg.trials = 20;
    cfg.seed = 1;
    let with = run_experiment(&cfg, None).map_err(|e| e.to_string())?;
    all_results(&with, "lambda_p = 10")?;
    let mut ablation = cfg.clone();
    ablation.train.lambda_p = 0.0;
    let without = run_experiment(&ablation, None).map_err(|e| e.to_string())?;
    all_results(&without, "lambda_p = 0")?;

    let rel_f = with.mean(|m| m.rel_f);
    let rel_l = with.mean(|m| m.rel_l);
    check(rel_f > 0.0, || format!("mean worst-case improvement {rel_f}"))?;
    check(rel_l >= 0.0, || format!("mean out-of-sample improvement {rel_l}"))?;
    for r in with.results.iter().chain(&without.results) {
        for pair in r.trace.records.windows(2) {
            check(pair[1].phi <= pair[0].phi + 1e-6, || {
                format!("trial {}: phi rises {} -> {} at iteration {}", r.metrics.trial, pair[0].phi, pair[1].phi, pair[1].iter)
            })?;
        }
    }
    let covered = with.results.iter().filter(|r| r.metrics.e_star <= 0.05).count();
    check(covered * 10 >= with.results.len() * 9, || format!("{covered}/{} trials with e <= 0.05", with.results.len()))?;
    for a in &with.results {
        let b = without
            .results
            .iter()
            .find(|b| b.metrics.trial == a.metrics.trial)
            .ok_or("unmatched trial")?;
        check(b.metrics.e_star > a.metrics.e_star, || {
            format!("trial {}: ablation e {} not above {}", a.metrics.trial, b.metrics.e_star, a.metrics.e_star)
        })?;
    }
    within_budget(start, Duration::from_secs(600))?;
    Ok(format!(
        "mean rel_f {rel_f:.3}, mean rel_l {rel_l:.3}, {covered}/20 covered, {:.0?}",
        start.elapsed()
    ))
}

// Criterion 7.

fn regression_training() -> Outcome {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(Family::RegressionAbs, 1, 20);
    cfg.trials = 10;
    cfg.seed = 1;
    let report = run_experiment(&cfg, None).map_err(|e| e.to_string())?;
    all_results(&report, "regression")?;
    let mut worst_oos = f64::NEG_INFINITY;
    for r in &report.results {
        let m = &r.metrics;
        check(m.f_star < m.f0, || format!("trial {}: e_wc {} -> {}", m.trial, m.f0, m.f_star))?;
        let growth = m.l_star / m.l0 - 1.0;
        worst_oos = worst_oos.max(growth);
        check(growth <= 0.05, || format!("trial {}: e_oos {} -> {}", m.trial, m.l0, m.l_star))?;
    }
    within_budget(start, Duration::from_secs(300))?;
    Ok(format!("largest e_oos change {:+.2}%, {:.0?}", 100.0 * worst_oos, start.elapsed()))
}

// Criterion 8.

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            out.push((rel, std::fs::read(&path)?));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut snapshots = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        for target in ["fig1", "fig2", "fig3", "fig4", "sensitivity"] {
            let status = Command::new(env!("CARGO_BIN_EXE_otdro"))
                .args(["repro", target, "--seed", "7", "--quick", "--out"])
                .arg(&out)
                .status()
                .map_err(|e| e.to_string())?;
            check(status.success(), || format!("repro {target} exited with {status}"))?;
        }
        let mut files = Vec::new();
        collect_files(&out, &out, &mut files).map_err(|e| e.to_string())?;
        files.sort();
        snapshots.push(files);
    }
    let csvs = snapshots[0].iter().filter(|(name, _)| name.ends_with(".csv")).count();
    check(csvs > 0, || "no CSV output".into())?;
    check(snapshots[0] == snapshots[1], || "outputs differ between runs".into())?;
    Ok(format!("{csvs} CSV files byte-identical"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("golden distance values", golden),
        ("solver correctness", solver_correctness),
        ("closed-form equivalences", closed_forms),
        ("differentiation", differentiation),
        ("worst-case moment saturation", saturation),
        ("training behavior", training_behavior),
        ("regression training", regression_training),
        ("determinism", determinism),
    ];
    // OTDRO_ACCEPTANCE=1,2,5 runs a subset.
    let only: Option<Vec<usize>> = std::env::var("OTDRO_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let start = Instant::now();
        match run() {
            Ok(detail) => println!("criterion {}: PASS {name} ({detail}; {:.1?})", i + 1, start.elapsed()),
            Err(why) => {
                println!("criterion {}: FAIL {name}: {why} ({:.1?})", i + 1, start.elapsed());
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
