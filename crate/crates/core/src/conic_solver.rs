//! Dense conic solver for `min cᵀx  s.t.  Ax + s = b, s ∈ K`.
//!
//! The main loop is an over-relaxed ADMM on the equilibrated problem. Once
//! the residuals are moderately small the iterate is handed to a semismooth
//! Newton refinement of the residual map (see [`crate::conic_diff`]), which
//! drives the KKT residuals to machine precision and is what downstream
//! differentiation consumes.

use std::path::Path;

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cones::{self, ConeBlock, ConeSpec};
use crate::conic_diff::{residual_jacobian_matrix, residual_vec, EmbeddingPoint};
use crate::error::{check_len, Error, Result};
use crate::linalg::{ensure_finite_mat, ensure_finite_vec, inf_norm, PivotedQr};
use crate::scalar::Real;

/// Standard-form conic data `(A, b, c, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConicProblemData<T: Real> {
    pub a: DMatrix<T>,
    pub b: DVector<T>,
    pub c: DVector<T>,
    pub cone: ConeSpec,
}

impl<T: Real> ConicProblemData<T> {
    pub fn new(a: DMatrix<T>, b: DVector<T>, c: DVector<T>, cone: ConeSpec) -> Result<Self> {
        let p = ConicProblemData { a, b, c, cone };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.a.shape();
        check_len("problem b", m, self.b.len())?;
        check_len("problem c", n, self.c.len())?;
        check_len("problem cone", m, self.cone.total_dim())?;
        ensure_finite_mat(&self.a, "problem A")?;
        ensure_finite_vec(&self.b, "problem b")?;
        ensure_finite_vec(&self.c, "problem c")?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn to_file(&self) -> ProblemFile {
        ProblemFile {
            a: self
                .a
                .row_iter()
                .map(|r| r.iter().map(|v| v.as_f64()).collect())
                .collect(),
            b: self.b.iter().map(|v| v.as_f64()).collect(),
            c: self.c.iter().map(|v| v.as_f64()).collect(),
            cones: self.cone.blocks().to_vec(),
        }
    }

    pub fn from_file(file: &ProblemFile) -> Result<Self> {
        let m = file.b.len();
        let n = file.c.len();
        check_len("problem A rows", m, file.a.len())?;
        for row in &file.a {
            check_len("problem A columns", n, row.len())?;
        }
        let a = DMatrix::from_fn(m, n, |i, j| T::lit(file.a[i][j]));
        let b = DVector::from_iterator(m, file.b.iter().map(|&v| T::lit(v)));
        let c = DVector::from_iterator(n, file.c.iter().map(|&v| T::lit(v)));
        Self::new(a, b, c, ConeSpec::new(file.cones.clone())?)
    }

    pub fn objective(&self, x: &DVector<T>) -> T {
        self.c.dot(x)
    }
}

/// JSON problem layout: `{"A": [[...]], "b": [...], "c": [...], "cones": [...]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProblemFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub cones: Vec<ConeBlock>,
}

impl ProblemFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrimalDualSolution<T: Real> {
    pub x: DVector<T>,
    pub y: DVector<T>,
    pub s: DVector<T>,
    pub status: SolveStatus,
    pub iterations: usize,
    /// `‖Ax + s − b‖₂`.
    pub primal_res: T,
    /// `‖Aᵀy + c‖₂`.
    pub dual_res: T,
    /// Objective gap `|cᵀx + bᵀy|`.
    pub gap: T,
}

impl<T: Real> PrimalDualSolution<T> {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn require_optimal(self) -> Result<Self> {
        if self.is_optimal() {
            Ok(self)
        } else {
            Err(Error::SolverFailed {
                status: self.status,
                iterations: self.iterations,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverSettings<T: Real> {
    pub tol: T,
    pub max_iter: usize,
    /// Over-relaxation factor in `(0, 2)`.
    pub relaxation: T,
    /// Ruiz equilibration of `A` before iterating.
    pub scaling: bool,
    /// Initial ADMM penalty.
    pub rho: T,
    /// Newton refinement of ADMM iterates.
    pub polish: bool,
}

impl<T: Real> Default for SolverSettings<T> {
    fn default() -> Self {
        SolverSettings {
            tol: T::lit(1e-9),
            max_iter: 200_000,
            relaxation: T::lit(1.6),
            scaling: true,
            rho: T::lit(0.1),
            polish: true,
        }
    }
}

impl<T: Real> SolverSettings<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > T::zero()) {
            return Err(Error::InvalidInput("solver tol must be positive".into()));
        }
        if !(self.relaxation > T::zero() && self.relaxation < T::lit(2.0)) {
            return Err(Error::InvalidInput("relaxation must lie in (0, 2)".into()));
        }
        if !(self.rho > T::zero()) {
            return Err(Error::InvalidInput("rho must be positive".into()));
        }
        Ok(())
    }
}

/// Unnormalized KKT residuals of a candidate point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResiduals<T: Real> {
    /// `‖Ax + s − b‖₂`.
    pub primal: T,
    /// `‖Aᵀy + c‖₂`.
    pub dual: T,
    /// Complementarity `|sᵀy|`.
    pub gap: T,
}

pub fn kkt_residuals<T: Real>(
    problem: &ConicProblemData<T>,
    candidate: &PrimalDualSolution<T>,
) -> Result<KktResiduals<T>> {
    check_len("candidate x", problem.n(), candidate.x.len())?;
    check_len("candidate y", problem.m(), candidate.y.len())?;
    check_len("candidate s", problem.m(), candidate.s.len())?;
    let pr = &problem.a * &candidate.x + &candidate.s - &problem.b;
    let dr = problem.a.tr_mul(&candidate.y) + &problem.c;
    Ok(KktResiduals {
        primal: pr.norm(),
        dual: dr.norm(),
        gap: candidate.s.dot(&candidate.y).abs(),
    })
}

/// Relative residuals used for termination, each normalized by the size of
/// the terms that make it up.
#[derive(Clone, Copy, Debug)]
struct Merit<T: Real> {
    primal: T,
    dual: T,
    gap: T,
    cone: T,
}

impl<T: Real> Merit<T> {
    fn worst(&self) -> T {
        self.primal.max(self.dual).max(self.gap).max(self.cone)
    }
}

fn merit<T: Real>(p: &ConicProblemData<T>, x: &DVector<T>, y: &DVector<T>, s: &DVector<T>) -> Merit<T> {
    let ax = &p.a * x;
    let aty = p.a.tr_mul(y);
    let one = T::one();
    let pr = inf_norm(&(&ax + s - &p.b));
    let pr_scale = one + inf_norm(&ax).max(inf_norm(s)).max(inf_norm(&p.b));
    let dr = inf_norm(&(&aty + &p.c));
    let dr_scale = one + inf_norm(&aty).max(inf_norm(&p.c));
    let cx = p.c.dot(x);
    let by = p.b.dot(y);
    let gap = (cx + by).abs() / (one + cx.abs().max(by.abs()));
    let cone_scale = one + inf_norm(s).max(inf_norm(y));
    let cone = cones::primal_violation(&p.cone, s).max(cones::dual_violation(&p.cone, y)) / cone_scale;
    Merit {
        primal: pr / pr_scale,
        dual: dr / dr_scale,
        gap,
        cone,
    }
}

fn finish<T: Real>(
    problem: &ConicProblemData<T>,
    x: DVector<T>,
    y: DVector<T>,
    s: DVector<T>,
    status: SolveStatus,
    iterations: usize,
) -> PrimalDualSolution<T> {
    let mut sol = PrimalDualSolution {
        x,
        y,
        s,
        status,
        iterations,
        primal_res: T::zero(),
        dual_res: T::zero(),
        gap: T::zero(),
    };
    let r = kkt_residuals(problem, &sol).expect("dimensions fixed by construction");
    sol.primal_res = r.primal;
    sol.dual_res = r.dual;
    sol.gap = (problem.c.dot(&sol.x) + problem.b.dot(&sol.y)).abs();
    sol
}

/// Semismooth Newton on the residual map from `z0`. Returns the refined point
/// in `(x, y, s)` form, or `None` if no progress was possible.
/// Backtracking on `‖N(z)‖`; updates the iterate and returns whether a step
/// was accepted.
fn line_search<T: Real>(
    problem: &ConicProblemData<T>,
    z: &mut EmbeddingPoint<T>,
    r: &mut DVector<T>,
    rn: &mut T,
    dz: &DVector<T>,
) -> bool {
    let mut t = T::one();
    for _ in 0..6 {
        let cand = z.step(dz, t);
        let rc = residual_vec(problem, &cand);
        let rcn = rc.norm();
        if rcn.is_finite_val() && rcn < (T::one() - T::lit(1e-4) * t) * *rn {
            *z = cand;
            *r = rc;
            *rn = rcn;
            return true;
        }
        t *= T::lit(0.5);
    }
    false
}

fn newton_polish<T: Real>(
    problem: &ConicProblemData<T>,
    z0: EmbeddingPoint<T>,
    max_steps: usize,
) -> (DVector<T>, DVector<T>, DVector<T>) {
    let mut z = z0;
    let mut r = residual_vec(problem, &z);
    let mut rn = r.norm();
    let floor = T::lit(1e-15) * (T::one() + inf_norm(&problem.b).max(inf_norm(&problem.c)));
    for _ in 0..max_steps {
        if rn <= floor {
            break;
        }
        let j = residual_jacobian_matrix(problem, &z);
        // LU is the cheap path; a truncated pivoted QR step handles the
        // (semismooth) Jacobians that are singular or nearly so.
        let lu_step = j.clone().lu().solve(&(-&r)).filter(|dz| dz.iter().all(|v| v.is_finite_val()));
        let mut accepted = lu_step.is_some_and(|dz| line_search(problem, &mut z, &mut r, &mut rn, &dz));
        if !accepted {
            let qr = PivotedQr::new(j);
            let rank = qr.rank(T::lit(1e-13));
            if rank == 0 {
                break;
            }
            let dz = qr.solve_truncated(&(-&r), rank);
            accepted = line_search(problem, &mut z, &mut r, &mut rn, &dz);
        }
        if !accepted {
            break;
        }
    }
    z.to_xys(&problem.cone)
}

/// Ruiz equilibration with factors kept constant on SOC blocks.
struct Scaling<T: Real> {
    d: DVector<T>,
    e: DVector<T>,
    c_scale: T,
}

fn ruiz<T: Real>(a: &DMatrix<T>, c: &DVector<T>, cone: &ConeSpec, enabled: bool) -> Scaling<T> {
    let (m, n) = a.shape();
    let mut d = DVector::from_element(n, T::one());
    let mut e = DVector::from_element(m, T::one());
    if enabled {
        let lo = T::lit(1e-4);
        let hi = T::lit(1e4);
        let mut work = a.clone();
        for _ in 0..15 {
            let mut dc = DVector::from_element(n, T::one());
            for j in 0..n {
                let mx = work.column(j).amax();
                if mx > T::zero() {
                    dc[j] = T::one() / mx.sqrt();
                }
            }
            let mut ec = DVector::from_element(m, T::one());
            for i in 0..m {
                let mx = work.row(i).amax();
                if mx > T::zero() {
                    ec[i] = T::one() / mx.sqrt();
                }
            }
            for (off, b) in cone.offsets() {
                if b.kind == cones::ConeKind::SecondOrder {
                    let mean = ec.rows(off, b.dim).sum() / T::from_count(b.dim);
                    ec.rows_mut(off, b.dim).fill(mean);
                }
            }
            d.component_mul_assign(&dc);
            e.component_mul_assign(&ec);
            d.apply(|v| *v = v.max(lo).min(hi));
            e.apply(|v| *v = v.max(lo).min(hi));
            work.copy_from(a);
            for j in 0..n {
                work.column_mut(j).scale_mut(d[j]);
            }
            for i in 0..m {
                work.row_mut(i).scale_mut(e[i]);
            }
        }
    }
    let dc_norm = inf_norm(&d.component_mul(c));
    let c_scale = if enabled && dc_norm > T::zero() {
        (T::one() / dc_norm).max(T::lit(1e-4)).min(T::lit(1e4))
    } else {
        T::one()
    };
    Scaling { d, e, c_scale }
}

struct Admm<'a, T: Real> {
    problem: &'a ConicProblemData<T>,
    scaling: Scaling<T>,
    a: DMatrix<T>,
    b: DVector<T>,
    c: DVector<T>,
    zero_rows: Vec<bool>,
    rho: T,
    rho_vec: DVector<T>,
    sigma: T,
    chol: Cholesky<T, nalgebra::Dyn>,
    x: DVector<T>,
    s: DVector<T>,
    y: DVector<T>,
}

impl<'a, T: Real> Admm<'a, T> {
    fn new(problem: &'a ConicProblemData<T>, settings: &SolverSettings<T>) -> Self {
        let scaling = ruiz(&problem.a, &problem.c, &problem.cone, settings.scaling);
        let mut a = problem.a.clone();
        for j in 0..a.ncols() {
            a.column_mut(j).scale_mut(scaling.d[j]);
        }
        for i in 0..a.nrows() {
            a.row_mut(i).scale_mut(scaling.e[i]);
        }
        let b = problem.b.component_mul(&scaling.e);
        let c = problem.c.component_mul(&scaling.d) * scaling.c_scale;
        let zero_rows = problem.cone.is_zero_row();
        let sigma = T::lit(1e-6);
        let rho = settings.rho;
        let (rho_vec, chol) = Self::factor(&a, &zero_rows, rho, sigma);
        let (m, n) = a.shape();
        Admm {
            problem,
            scaling,
            a,
            b,
            c,
            zero_rows,
            rho,
            rho_vec,
            sigma,
            chol,
            x: DVector::zeros(n),
            s: DVector::zeros(m),
            y: DVector::zeros(m),
        }
    }

    fn factor(
        a: &DMatrix<T>,
        zero_rows: &[bool],
        rho: T,
        sigma: T,
    ) -> (DVector<T>, Cholesky<T, nalgebra::Dyn>) {
        let m = a.nrows();
        let n = a.ncols();
        let rho_vec = DVector::from_iterator(
            m,
            zero_rows
                .iter()
                .map(|&z| if z { rho * T::lit(1e3) } else { rho }),
        );
        let mut ra = a.clone();
        for i in 0..m {
            ra.row_mut(i).scale_mut(rho_vec[i]);
        }
        let mut k = a.tr_mul(&ra);
        for i in 0..n {
            k[(i, i)] += sigma;
        }
        let chol = Cholesky::new(k).expect("sigma I + Aᵀ R A is positive definite");
        (rho_vec, chol)
    }

    fn iterate(&mut self, alpha: T) {
        let one = T::one();
        let mut w = &self.b - &self.s;
        w.component_mul_assign(&self.rho_vec);
        w -= &self.y;
        let rhs = &self.x * self.sigma - &self.c + self.a.tr_mul(&w);
        let xt = self.chol.solve(&rhs);
        let st = &self.b - &self.a * &xt;
        let x_new = &xt * alpha + &self.x * (one - alpha);
        let s_rel = &st * alpha + &self.s * (one - alpha);
        let mut s_new = &s_rel - self.y.component_div(&self.rho_vec);
        cones::project_primal_in_place(&self.problem.cone, &mut s_new);
        let dy = (&s_new - &s_rel).component_mul(&self.rho_vec);
        self.y += dy;
        self.x = x_new;
        self.s = s_new;
    }

    fn adapt_rho(&mut self) {
        let ax = &self.a * &self.x;
        let aty = self.a.tr_mul(&self.y);
        let tiny = T::lit(1e-10);
        let rp = inf_norm(&(&ax + &self.s - &self.b))
            / inf_norm(&ax).max(inf_norm(&self.s)).max(inf_norm(&self.b)).max(tiny);
        let rd = inf_norm(&(&aty + &self.c)) / inf_norm(&aty).max(inf_norm(&self.c)).max(tiny);
        let ratio = (rp / rd.max(T::lit(1e-16))).sqrt();
        let new_rho = (self.rho * ratio).max(T::lit(1e-6)).min(T::lit(1e6));
        if new_rho > self.rho * T::lit(5.0) || new_rho < self.rho * T::lit(0.2) {
            self.rho = new_rho;
            let (rv, ch) = Self::factor(&self.a, &self.zero_rows, new_rho, self.sigma);
            self.rho_vec = rv;
            self.chol = ch;
        }
    }

    /// Current iterate in original coordinates.
    fn unscaled(&self) -> (DVector<T>, DVector<T>, DVector<T>) {
        let x = self.x.component_mul(&self.scaling.d);
        let s = self.s.component_div(&self.scaling.e);
        let y = self.y.component_mul(&self.scaling.e) / self.scaling.c_scale;
        (x, y, s)
    }

    fn diverged(&self) -> Option<SolveStatus> {
        let limit = T::lit(1e8) * (T::one() + inf_norm(&self.b).max(inf_norm(&self.c)));
        if inf_norm(&self.y) > limit {
            Some(SolveStatus::Infeasible)
        } else if inf_norm(&self.x) > limit {
            Some(SolveStatus::Unbounded)
        } else {
            None
        }
    }
}

const CHECK_EVERY: usize = 10;
const ADAPT_EVERY: usize = 50;
const POLISH_STEPS: usize = 12;

pub fn solve<T: Real>(
    problem: &ConicProblemData<T>,
    settings: &SolverSettings<T>,
) -> Result<PrimalDualSolution<T>> {
    problem.validate()?;
    settings.validate()?;
    let tol = settings.tol;
    let alpha = settings.relaxation;
    let mut admm = Admm::new(problem, settings);
    let mut polish_trigger = T::lit(1e-2).max(tol);
    let mut last_polish = 0usize;
    let mut best: Option<(T, DVector<T>, DVector<T>, DVector<T>)> = None;

    for it in 1..=settings.max_iter {
        admm.iterate(alpha);
        if it % ADAPT_EVERY == 0 {
            admm.adapt_rho();
        }
        if it % CHECK_EVERY != 0 && it != settings.max_iter {
            continue;
        }
        if let Some(status) = admm.diverged() {
            let (x, y, s) = admm.unscaled();
            debug!("conic solve diverged at iteration {it}: {status:?}");
            return Ok(finish(problem, x, y, s, status, it));
        }
        let (x, y, s) = admm.unscaled();
        let m = merit(problem, &x, &y, &s);
        let worst = m.worst();
        let admm_done = worst <= tol;
        let try_polish = settings.polish
            && (admm_done || (worst <= polish_trigger && it >= last_polish + 5 * CHECK_EVERY));
        if try_polish {
            last_polish = it;
            let z = EmbeddingPoint::from_xys(&x, &y, &s);
            let (px, py, ps) = newton_polish(problem, z, POLISH_STEPS);
            let pm = merit(problem, &px, &py, &ps).worst();
            if pm <= tol {
                debug!("conic solve polished at iteration {it}");
                return Ok(finish(problem, px, py, ps, SolveStatus::Optimal, it));
            }
            if best.as_ref().map_or(true, |b| pm < b.0) {
                best = Some((pm, px, py, ps));
            }
            polish_trigger = (polish_trigger * T::lit(0.1)).max(tol);
        }
        if admm_done {
            return Ok(finish(problem, x, y, s, SolveStatus::Optimal, it));
        }
    }
    let (x, y, s) = admm.unscaled();
    let worst = merit(problem, &x, &y, &s).worst();
    let (x, y, s) = match best {
        Some((pm, px, py, ps)) if pm < worst => (px, py, ps),
        _ => (x, y, s),
    };
    Ok(finish(problem, x, y, s, SolveStatus::MaxIter, settings.max_iter))
}

/// Re-solves a perturbed problem starting from a nearby solution by Newton
/// refinement alone, falling back to a cold solve when that does not reach
/// tolerance. Used by the training loop, where consecutive problems differ by
/// one small parameter step.
pub(crate) fn solve_from<T: Real>(
    problem: &ConicProblemData<T>,
    settings: &SolverSettings<T>,
    previous: &PrimalDualSolution<T>,
) -> Result<PrimalDualSolution<T>> {
    problem.validate()?;
    settings.validate()?;
    if previous.x.len() == problem.n() && previous.y.len() == problem.m() {
        let z = EmbeddingPoint::from_xys(&previous.x, &previous.y, &previous.s);
        let (x, y, s) = newton_polish(problem, z, POLISH_STEPS);
        if merit(problem, &x, &y, &s).worst() <= settings.tol {
            return Ok(finish(problem, x, y, s, SolveStatus::Optimal, 0));
        }
    }
    solve(problem, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lp_x_ge_1() -> ConicProblemData<f64> {
        ConicProblemData::new(
            DMatrix::from_element(1, 1, -1.0),
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 1.0),
            ConeSpec::new(vec![ConeBlock::nonneg(1)]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn solves_trivial_lp() {
        let p = lp_x_ge_1();
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.y[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn solves_small_socp() {
        // min t  s.t. ‖(1,1)‖ ≤ t, written as (t, 1, 1) ∈ SOC(3).
        let a = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 0.0]);
        let b = DVector::from_vec(vec![0.0, 1.0, 1.0]);
        let c = DVector::from_vec(vec![1.0]);
        let p = ConicProblemData::new(a, b, c, ConeSpec::new(vec![ConeBlock::soc(3)]).unwrap()).unwrap();
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.x[0], 2f64.sqrt(), epsilon = 1e-9);
        // brute-force grid: smallest t on a 1e-4 grid with ‖(1,1)‖ ≤ t
        let grid_t = (0..30000).map(|i| i as f64 * 1e-4).find(|t| 2f64.sqrt() <= *t).unwrap();
        assert!((sol.x[0] - grid_t).abs() <= 1e-4);
    }

    #[test]
    fn kkt_residual_examples() {
        let p = lp_x_ge_1();
        let exact = finish(
            &p,
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.0),
            SolveStatus::Optimal,
            0,
        );
        let r = kkt_residuals(&p, &exact).unwrap();
        assert_eq!((r.primal, r.dual, r.gap), (0.0, 0.0, 0.0));
        let mut pert = exact.clone();
        pert.x[0] += 0.25;
        assert_relative_eq!(kkt_residuals(&p, &pert).unwrap().primal, 0.25);
        let mut bad = exact.clone();
        bad.x[0] = 3.0;
        bad.y[0] = 2.0;
        bad.s[0] = 0.5;
        let r = kkt_residuals(&p, &bad).unwrap();
        assert!(r.primal > 0.0 && r.dual > 0.0 && r.gap > 0.0);
        bad.x = DVector::zeros(2);
        assert!(kkt_residuals(&p, &bad).is_err());
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        // x ≤ -1 and x ≥ 1.
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![-1.0, -1.0]);
        let c = DVector::from_vec(vec![0.0]);
        let p = ConicProblemData::new(a, b, c, ConeSpec::new(vec![ConeBlock::nonneg(2)]).unwrap()).unwrap();
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);

        // min x s.t. x ≤ 0: unbounded below.
        let a = DMatrix::from_element(1, 1, 1.0);
        let b = DVector::from_element(1, 0.0);
        let c = DVector::from_element(1, 1.0);
        let p = ConicProblemData::new(a, b, c, ConeSpec::new(vec![ConeBlock::nonneg(1)]).unwrap()).unwrap();
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Unbounded);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = lp_x_ge_1();
        p.b[0] = f64::NAN;
        assert!(solve(&p, &SolverSettings::default()).is_err());
        let p = lp_x_ge_1();
        let s = SolverSettings { relaxation: 2.0, ..Default::default() };
        assert!(solve(&p, &s).is_err());
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"A": [[-1.0]], "b": [-1.0], "c": [1.0], "cones": [{"kind": "nonneg", "dim": 1}]}"#;
        let file: ProblemFile = serde_json::from_str(text).unwrap();
        let p = ConicProblemData::<f64>::from_file(&file).unwrap();
        assert_eq!(p, lp_x_ge_1());
        let again = serde_json::to_string(&p.to_file()).unwrap();
        let back: ProblemFile = serde_json::from_str(&again).unwrap();
        assert_eq!(ConicProblemData::<f64>::from_file(&back).unwrap(), p);
    }

    #[test]
    fn warm_start_newton_matches_cold_solve() {
        let p = lp_x_ge_1();
        let settings = SolverSettings::default();
        let sol = solve(&p, &settings).unwrap();
        let mut q = p.clone();
        q.b[0] = -1.1;
        let warm = solve_from(&q, &settings, &sol).unwrap();
        assert_eq!(warm.status, SolveStatus::Optimal);
        assert_relative_eq!(warm.x[0], 1.1, epsilon = 1e-12);
    }

    #[test]
    fn solves_in_single_precision() {
        let a = DMatrix::from_element(1, 1, -1.0f32);
        let p = ConicProblemData::new(
            a,
            DVector::from_element(1, -1.0f32),
            DVector::from_element(1, 1.0f32),
            ConeSpec::new(vec![ConeBlock::nonneg(1)]).unwrap(),
        )
        .unwrap();
        let settings = SolverSettings { tol: 1e-5f32, ..Default::default() };
        let sol = solve(&p, &settings).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-4);
    }
}
