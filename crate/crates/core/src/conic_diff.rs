//! Derivatives of the conic solution map `(A, b, c) ↦ (x, y, s)`.
//!
//! A solution is encoded as `z = (u, v) = (x, y − s)`, and optimality is the
//! root condition `N(z) = 0` of
//!
//! ```text
//! N(z) = (Q − I) Π(z) + V + z
//!      = ( Aᵀ Π*(v) + c,  −A u + v − Π*(v) + b ),
//! ```
//!
//! with `Q = [[0, Aᵀ], [−A, 0]]`, `V = (c, b)` and `Π = (id, Π_{K*})`.
//! Recovering `x = u`, `y = Π*(v)`, `s = Π*(v) − v` turns the two blocks into
//! `Aᵀy + c = 0` and `Ax + s = b`, which fixes the sign convention.

use nalgebra::{DMatrix, DVector};

use crate::cones::{self, ConeSpec};
use crate::conic_solver::{ConicProblemData, PrimalDualSolution};
use crate::error::{check_len, Error, Result};
use crate::linalg::{ridge_lstsq, PivotedQr};
use crate::scalar::Real;

/// Condition estimate above which the residual Jacobian is treated as singular.
pub const SINGULAR_COND: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPoint<T: Real> {
    pub u: DVector<T>,
    pub v: DVector<T>,
}

impl<T: Real> EmbeddingPoint<T> {
    pub fn from_xys(x: &DVector<T>, y: &DVector<T>, s: &DVector<T>) -> Self {
        EmbeddingPoint {
            u: x.clone(),
            v: y - s,
        }
    }

    pub fn from_solution(sol: &PrimalDualSolution<T>) -> Self {
        Self::from_xys(&sol.x, &sol.y, &sol.s)
    }

    /// `(x, y, s)` recovered through the dual-cone projection.
    pub fn to_xys(&self, cone: &ConeSpec) -> (DVector<T>, DVector<T>, DVector<T>) {
        let mut y = self.v.clone();
        cones::project_dual_in_place(cone, &mut y);
        let s = &y - &self.v;
        (self.u.clone(), y, s)
    }

    pub fn as_vector(&self) -> DVector<T> {
        let n = self.u.len();
        let m = self.v.len();
        let mut z = DVector::zeros(n + m);
        z.rows_mut(0, n).copy_from(&self.u);
        z.rows_mut(n, m).copy_from(&self.v);
        z
    }

    pub fn from_vector(z: &DVector<T>, n: usize) -> Self {
        let m = z.len() - n;
        EmbeddingPoint {
            u: z.rows(0, n).clone_owned(),
            v: z.rows(n, m).clone_owned(),
        }
    }

    pub(crate) fn step(&self, dz: &DVector<T>, t: T) -> Self {
        let n = self.u.len();
        let m = self.v.len();
        EmbeddingPoint {
            u: &self.u + dz.rows(0, n) * t,
            v: &self.v + dz.rows(n, m) * t,
        }
    }
}

pub(crate) fn residual_vec<T: Real>(p: &ConicProblemData<T>, z: &EmbeddingPoint<T>) -> DVector<T> {
    let (n, m) = (p.n(), p.m());
    let mut pv = z.v.clone();
    cones::project_dual_in_place(&p.cone, &mut pv);
    let mut out = DVector::zeros(n + m);
    out.rows_mut(0, n).copy_from(&(p.a.tr_mul(&pv) + &p.c));
    out.rows_mut(n, m)
        .copy_from(&(-(&p.a * &z.u) + &z.v - &pv + &p.b));
    out
}

/// `J_z = (Q − I) J_Π + I = [[0, Aᵀ D], [−A, I − D]]` with `D = J_{Π*}(v)`.
fn assemble_jacobian<T: Real>(a: &DMatrix<T>, d: &DMatrix<T>) -> DMatrix<T> {
    let (m, n) = a.shape();
    let mut j = DMatrix::zeros(n + m, n + m);
    j.view_mut((0, n), (n, m)).copy_from(&a.tr_mul(d));
    j.view_mut((n, 0), (m, n)).copy_from(&(-a));
    let mut lower = -d.clone();
    for i in 0..m {
        lower[(i, i)] += T::one();
    }
    j.view_mut((n, n), (m, m)).copy_from(&lower);
    j
}

pub(crate) fn residual_jacobian_matrix<T: Real>(p: &ConicProblemData<T>, z: &EmbeddingPoint<T>) -> DMatrix<T> {
    let d = cones::projection_jacobian_dual(&p.cone, &z.v).expect("v sized by construction");
    assemble_jacobian(&p.a, &d)
}

fn check_point<T: Real>(p: &ConicProblemData<T>, z: &EmbeddingPoint<T>) -> Result<()> {
    check_len("embedding u", p.n(), z.u.len())?;
    check_len("embedding v", p.m(), z.v.len())
}

/// Evaluates `N(z, A, b, c)`.
pub fn residual<T: Real>(z: &EmbeddingPoint<T>, problem: &ConicProblemData<T>) -> Result<DVector<T>> {
    check_point(problem, z)?;
    Ok(residual_vec(problem, z))
}

/// Jacobian of the residual map in `z`, plus the data needed to apply its
/// partial derivatives in `(A, b, c)`.
#[derive(Clone, Debug)]
pub struct ResidualJacobian<T: Real> {
    pub jz: DMatrix<T>,
    /// `J_{Π*}(v)`.
    pub d: DMatrix<T>,
    /// `Π(z) = (u, Π*(v))`, split.
    pi_u: DVector<T>,
    pi_v: DVector<T>,
}

impl<T: Real> ResidualJacobian<T> {
    /// `∂N/∂(A,b,c)` applied to a data direction:
    /// `[[0, dAᵀ], [−dA, 0]] Π(z) + (dc, db)`.
    pub fn data_direction(&self, da: &DMatrix<T>, db: &DVector<T>, dc: &DVector<T>) -> Result<DVector<T>> {
        let (n, m) = (self.pi_u.len(), self.pi_v.len());
        check_len("dA rows", m, da.nrows())?;
        check_len("dA cols", n, da.ncols())?;
        check_len("db", m, db.len())?;
        check_len("dc", n, dc.len())?;
        let mut out = DVector::zeros(n + m);
        out.rows_mut(0, n).copy_from(&(da.tr_mul(&self.pi_v) + dc));
        out.rows_mut(n, m).copy_from(&(-(da * &self.pi_u) + db));
        Ok(out)
    }
}

pub fn residual_jacobian<T: Real>(
    z: &EmbeddingPoint<T>,
    problem: &ConicProblemData<T>,
) -> Result<ResidualJacobian<T>> {
    check_point(problem, z)?;
    let d = cones::projection_jacobian_dual(&problem.cone, &z.v)?;
    let jz = assemble_jacobian(&problem.a, &d);
    let pi_v = cones::project_dual(&problem.cone, &z.v)?;
    Ok(ResidualJacobian {
        jz,
        d,
        pi_u: z.u.clone(),
        pi_v,
    })
}

/// Reverse-mode output: sensitivities of a scalar with respect to the data.
#[derive(Clone, Debug, PartialEq)]
pub struct DataGradient<T: Real> {
    pub da: DMatrix<T>,
    pub db: DVector<T>,
    pub dc: DVector<T>,
}

enum Solver<T: Real> {
    Exact(PivotedQr<T>),
    Ridge(T),
}

/// A factored residual Jacobian at one solution, reusable across many
/// forward and adjoint evaluations.
pub struct Differentiator<T: Real> {
    jac: ResidualJacobian<T>,
    solver: Solver<T>,
    cond: f64,
    x: DVector<T>,
    y: DVector<T>,
}

impl<T: Real> Differentiator<T> {
    /// Factors `J_z`; fails with [`Error::SingularJacobian`] when its condition
    /// estimate exceeds [`SINGULAR_COND`].
    pub fn new(solution: &PrimalDualSolution<T>, problem: &ConicProblemData<T>) -> Result<Self> {
        let (jac, x, y) = Self::prepare(solution, problem)?;
        let qr = PivotedQr::new(jac.jz.clone());
        let cond = qr.condition_estimate();
        if !(cond <= SINGULAR_COND) {
            return Err(Error::SingularJacobian { cond });
        }
        Ok(Differentiator {
            jac,
            solver: Solver::Exact(qr),
            cond,
            x,
            y,
        })
    }

    /// Tikhonov-regularized variant that never reports singularity.
    pub fn with_ridge(solution: &PrimalDualSolution<T>, problem: &ConicProblemData<T>, ridge: T) -> Result<Self> {
        let (jac, x, y) = Self::prepare(solution, problem)?;
        let cond = PivotedQr::new(jac.jz.clone()).condition_estimate();
        Ok(Differentiator {
            jac,
            solver: Solver::Ridge(ridge),
            cond,
            x,
            y,
        })
    }

    fn prepare(
        solution: &PrimalDualSolution<T>,
        problem: &ConicProblemData<T>,
    ) -> Result<(ResidualJacobian<T>, DVector<T>, DVector<T>)> {
        check_len("solution x", problem.n(), solution.x.len())?;
        check_len("solution y", problem.m(), solution.y.len())?;
        check_len("solution s", problem.m(), solution.s.len())?;
        let z = EmbeddingPoint::from_solution(solution);
        let jac = residual_jacobian(&z, problem)?;
        Ok((jac, solution.x.clone(), solution.y.clone()))
    }

    pub fn condition_estimate(&self) -> f64 {
        self.cond
    }

    pub fn jacobian(&self) -> &ResidualJacobian<T> {
        &self.jac
    }

    fn solve_jz(&self, rhs: &DVector<T>) -> DVector<T> {
        match &self.solver {
            Solver::Exact(qr) => qr.solve(rhs),
            Solver::Ridge(r) => ridge_lstsq(&self.jac.jz, rhs, *r),
        }
    }

    fn solve_jz_t(&self, rhs: &DVector<T>) -> DVector<T> {
        match &self.solver {
            Solver::Exact(qr) => qr.solve_transpose(rhs),
            Solver::Ridge(r) => ridge_lstsq(&self.jac.jz.transpose(), rhs, *r),
        }
    }

    /// Forward mode: `(dx, dy, ds)` induced by a data perturbation.
    pub fn forward(
        &self,
        da: &DMatrix<T>,
        db: &DVector<T>,
        dc: &DVector<T>,
    ) -> Result<(DVector<T>, DVector<T>, DVector<T>)> {
        let n = self.x.len();
        let m = self.y.len();
        let r = self.jac.data_direction(da, db, dc)?;
        let dz = -self.solve_jz(&r);
        let du = dz.rows(0, n).clone_owned();
        let dv = dz.rows(n, m).clone_owned();
        let dy = &self.jac.d * &dv;
        let ds = &dy - &dv;
        Ok((du, dy, ds))
    }

    /// Adjoint mode: pulls a cotangent `(dx, dy, ds)` back to `(dA, db, dc)`.
    pub fn adjoint(&self, dx: &DVector<T>, dy: &DVector<T>, ds: &DVector<T>) -> Result<DataGradient<T>> {
        let n = self.x.len();
        let m = self.y.len();
        check_len("adjoint dx", n, dx.len())?;
        check_len("adjoint dy", m, dy.len())?;
        check_len("adjoint ds", m, ds.len())?;
        let mut seed = DVector::zeros(n + m);
        seed.rows_mut(0, n).copy_from(dx);
        seed.rows_mut(n, m)
            .copy_from(&(self.jac.d.tr_mul(&(dy + ds)) - ds));
        let g = -self.solve_jz_t(&seed);
        let gu = g.rows(0, n).clone_owned();
        let gv = g.rows(n, m).clone_owned();
        let da = &self.y * gu.transpose() - &gv * self.x.transpose();
        Ok(DataGradient { da, db: gv, dc: gu })
    }
}

pub fn forward_derivative<T: Real>(
    solution: &PrimalDualSolution<T>,
    problem: &ConicProblemData<T>,
    da: &DMatrix<T>,
    db: &DVector<T>,
    dc: &DVector<T>,
) -> Result<(DVector<T>, DVector<T>, DVector<T>)> {
    Differentiator::new(solution, problem)?.forward(da, db, dc)
}

pub fn adjoint_derivative<T: Real>(
    solution: &PrimalDualSolution<T>,
    problem: &ConicProblemData<T>,
    dx: &DVector<T>,
    dy: &DVector<T>,
    ds: &DVector<T>,
) -> Result<DataGradient<T>> {
    Differentiator::new(solution, problem)?.adjoint(dx, dy, ds)
}
