//! Transport distances under the Mahalanobis cost `‖Lᵀ(ξ₁ − ξ₂)‖^p` and
//! their gradients in `L`.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cones::{ConeBlock, ConeSpec};
use crate::conic_solver::{self, ConicProblemData, SolverSettings};
use crate::error::{check_len, Error, Result};
use crate::linalg::{asymmetry, lower_triangle, spectral_map, sym_eigen};
use crate::scalar::Real;
use crate::transport_lp::solve_transport_from;

/// Lower-triangular `L` with positive diagonal, and the cost order `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportParam<T: Real> {
    l: DMatrix<T>,
    p: u32,
}

impl<T: Real> TransportParam<T> {
    pub fn new(l: DMatrix<T>, p: u32) -> Result<Self> {
        let d = l.nrows();
        if d == 0 || l.ncols() != d {
            return Err(Error::InvalidInput("L must be square and nonempty".into()));
        }
        if p == 0 {
            return Err(Error::InvalidInput("cost order p must be >= 1".into()));
        }
        for i in 0..d {
            if !(l[(i, i)] > T::zero()) {
                return Err(Error::InvalidInput(format!("L[{i},{i}] must be positive")));
            }
            for j in (i + 1)..d {
                if l[(i, j)] != T::zero() {
                    return Err(Error::InvalidInput("L must be lower triangular".into()));
                }
            }
        }
        if l.iter().any(|v| !v.is_finite_val()) {
            return Err(Error::NonFinite("L"));
        }
        Ok(TransportParam { l, p })
    }

    pub fn identity(d: usize, p: u32) -> Self {
        Self::new(DMatrix::identity(d, d), p).expect("identity is a valid parameter")
    }

    pub fn l(&self) -> &DMatrix<T> {
        &self.l
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `M = L Lᵀ`.
    pub fn metric(&self) -> DMatrix<T> {
        &self.l * self.l.transpose()
    }

    pub fn with_l(&self, l: DMatrix<T>) -> Result<Self> {
        Self::new(l, self.p)
    }
}

/// Weighted point cloud; rows of `points` are atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution<T: Real> {
    points: DMatrix<T>,
    weights: DVector<T>,
}

impl<T: Real> DiscreteDistribution<T> {
    pub fn new(points: DMatrix<T>, weights: DVector<T>) -> Result<Self> {
        check_len("distribution weights", points.nrows(), weights.len())?;
        if points.nrows() == 0 {
            return Err(Error::InvalidInput("distribution has no atoms".into()));
        }
        if weights.iter().any(|w| *w < T::zero()) {
            return Err(Error::InvalidInput("negative weight".into()));
        }
        let tol = T::lit(1e-12).max(T::default_epsilon() * T::from_count(8 * weights.len()));
        if (weights.sum() - T::one()).abs() > tol {
            return Err(Error::InvalidInput("weights must sum to 1".into()));
        }
        if points.iter().chain(weights.iter()).any(|v| !v.is_finite_val()) {
            return Err(Error::NonFinite("distribution"));
        }
        Ok(DiscreteDistribution { points, weights })
    }

    /// Equal weights `1/J` on the rows of `points`.
    pub fn uniform(points: DMatrix<T>) -> Result<Self> {
        let n = points.nrows();
        let w = DVector::from_element(n, T::one() / T::from_count(n.max(1)));
        Self::new(points, w)
    }

    pub fn points(&self) -> &DMatrix<T> {
        &self.points
    }

    pub fn weights(&self) -> &DVector<T> {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn mean(&self) -> DVector<T> {
        self.points.tr_mul(&self.weights)
    }
}

/// Mean-covariance pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments<T: Real> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
}

impl<T: Real> GaussianMoments<T> {
    /// Validates symmetry and clips slightly negative eigenvalues to zero.
    pub fn new(mean: DVector<T>, cov: DMatrix<T>) -> Result<Self> {
        let d = mean.len();
        check_len("covariance rows", d, cov.nrows())?;
        check_len("covariance cols", d, cov.ncols())?;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite_val()) {
            return Err(Error::NonFinite("moments"));
        }
        let asym = asymmetry(&cov);
        if asym > T::lit(1e-12) * (T::one() + cov.amax()) {
            return Err(Error::NonSymmetric { asym: asym.as_f64() });
        }
        let (vals, vecs) = sym_eigen(&cov);
        let min = vals.min();
        if min < T::lit(-1e-10) {
            return Err(Error::InvalidInput(format!(
                "covariance not PSD (min eigenvalue {:.3e})",
                min.as_f64()
            )));
        }
        let cov = if min < T::zero() {
            spectral_map(&vals, &vecs, |l| l.max(T::zero()))
        } else {
            cov
        };
        Ok(GaussianMoments { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn mahalanobis_cost<T: Real>(x1: &DVector<T>, x2: &DVector<T>, param: &TransportParam<T>) -> Result<T> {
    check_len("cost x1", param.dim(), x1.len())?;
    check_len("cost x2", param.dim(), x2.len())?;
    let r = param.l.tr_mul(&(x1 - x2)).norm();
    Ok(r.powi(param.p as i32))
}

/// Cost matrix `C_ij = κ(p_i, q_j)` together with the differences used by
/// the envelope gradient.
pub fn cost_matrix<T: Real>(
    p: &DiscreteDistribution<T>,
    q: &DiscreteDistribution<T>,
    param: &TransportParam<T>,
) -> Result<DMatrix<T>> {
    check_len("distribution dimension", param.dim(), p.dim())?;
    check_len("distribution dimension", param.dim(), q.dim())?;
    // Project the atoms once: ‖Lᵀ(x − y)‖ = ‖Lᵀx − Lᵀy‖.
    let pp = &p.points * &param.l;
    let qq = &q.points * &param.l;
    let pow = param.p as i32;
    Ok(DMatrix::from_fn(p.len(), q.len(), |i, j| {
        let mut s = T::zero();
        for k in 0..param.dim() {
            let d = pp[(i, k)] - qq[(j, k)];
            s += d * d;
        }
        s.sqrt().powi(pow)
    }))
}

/// Transport LP in conic standard form over the row-major plan `π`.
///
/// The last column-marginal equality is implied by the others and omitted.
pub fn transport_conic_problem<T: Real>(cost: &DMatrix<T>, a: &DVector<T>, b: &DVector<T>) -> ConicProblemData<T> {
    let (ns, nd) = cost.shape();
    let nv = ns * nd;
    let neq = ns + nd - 1;
    let m = neq + nv;
    let mut mat = DMatrix::zeros(m, nv);
    let mut rhs = DVector::zeros(m);
    for i in 0..ns {
        for j in 0..nd {
            mat[(i, i * nd + j)] = T::one();
        }
        rhs[i] = a[i];
    }
    for j in 0..nd - 1 {
        for i in 0..ns {
            mat[(ns + j, i * nd + j)] = T::one();
        }
        rhs[ns + j] = b[j];
    }
    for k in 0..nv {
        mat[(neq + k, k)] = -T::one();
    }
    let c = DVector::from_iterator(nv, (0..ns).flat_map(|i| (0..nd).map(move |j| (i, j))).map(|(i, j)| cost[(i, j)]));
    let cone = ConeSpec::new(vec![ConeBlock::zero(neq), ConeBlock::nonneg(nv)]).expect("positive dims");
    ConicProblemData::new(mat, rhs, c, cone).expect("consistent transport data")
}

/// Optimal transport value `min Σ π_ij C_ij` and plan.
pub fn optimal_plan<T: Real>(
    p: &DiscreteDistribution<T>,
    q: &DiscreteDistribution<T>,
    param: &TransportParam<T>,
) -> Result<(T, DMatrix<T>)> {
    let pt = discrete_point(p, q, param, None)?;
    Ok((pt.value, pt.plan))
}

/// Optimal plan with its value, distance and basis.
#[derive(Clone, Debug)]
pub struct DiscretePoint<T: Real> {
    pub distance: T,
    pub value: T,
    pub plan: DMatrix<T>,
    pub basis: Vec<(usize, usize)>,
}

/// Solves the transport problem, warm-started from a previous basis for
/// the same marginals when given.
pub fn discrete_point<T: Real>(
    p: &DiscreteDistribution<T>,
    q: &DiscreteDistribution<T>,
    param: &TransportParam<T>,
    warm: Option<&[(usize, usize)]>,
) -> Result<DiscretePoint<T>> {
    let cost = cost_matrix(p, q, param)?;
    let sol = solve_transport_from(&cost, &p.weights, &q.weights, warm)?;
    let value = sol.value.max(T::zero());
    Ok(DiscretePoint {
        distance: root(value, param.p),
        value,
        plan: sol.plan,
        basis: sol.basis,
    })
}

fn root<T: Real>(value: T, p: u32) -> T {
    match p {
        1 => value,
        2 => value.sqrt(),
        _ => value.powf(T::one() / T::from_count(p as usize)),
    }
}

/// `W_p(P, Q; L)`: the `p`-th root of the optimal transport value.
pub fn discrete_distance<T: Real>(
    p: &DiscreteDistribution<T>,
    q: &DiscreteDistribution<T>,
    param: &TransportParam<T>,
) -> Result<T> {
    Ok(discrete_point(p, q, param, None)?.distance)
}

/// Same distance computed through the general conic solver.
pub fn discrete_distance_conic<T: Real>(
    p: &DiscreteDistribution<T>,
    q: &DiscreteDistribution<T>,
    param: &TransportParam<T>,
    settings: &SolverSettings<T>,
) -> Result<T> {
    let cost = cost_matrix(p, q, param)?;
    let prob = transport_conic_problem(&cost, &p.weights, &q.weights);
    let sol = conic_solver::solve(&prob, settings)?.require_optimal()?;
    Ok(root(prob.c.dot(&sol.x).max(T::zero()), param.p))
}

/// Envelope gradient of the distance in `L`, restricted to the lower triangle.
///
/// Pairs with zero cost contribute a zero term when `p = 1`, where the norm
/// is not differentiable.
pub fn discrete_distance_gradient<T: Real>(
    p: &DiscreteDistribution<T>,
    q: &DiscreteDistribution<T>,
    param: &TransportParam<T>,
) -> Result<DMatrix<T>> {
    discrete_point_gradient(&discrete_point(p, q, param, None)?, p, q, param)
}

/// Envelope gradient at an already solved plan.
pub fn discrete_point_gradient<T: Real>(
    pt: &DiscretePoint<T>,
    p: &DiscreteDistribution<T>,
    q: &DiscreteDistribution<T>,
    param: &TransportParam<T>,
) -> Result<DMatrix<T>> {
    let (value, plan) = (pt.value, &pt.plan);
    let d = param.dim();
    let order = param.p as i32;
    // Σ_r π_r c'(‖LᵀΔ_r‖) Δ_r Δ_rᵀ / ‖LᵀΔ_r‖, then one multiplication by L.
    let mut weighted_outer = DMatrix::zeros(d, d);
    let mut zero_cost_pairs = 0usize;
    for i in 0..p.len() {
        for j in 0..q.len() {
            let w = plan[(i, j)];
            if w == T::zero() {
                continue;
            }
            let delta = p.points.row(i).transpose() - q.points.row(j).transpose();
            let r = param.l.tr_mul(&delta).norm();
            let coef = if order == 2 {
                T::lit(2.0)
            } else if r == T::zero() {
                zero_cost_pairs += 1;
                continue;
            } else {
                T::from_count(param.p as usize) * r.powi(order - 2)
            };
            weighted_outer += &delta * delta.transpose() * (w * coef);
        }
    }
    if zero_cost_pairs > 0 {
        debug!("{zero_cost_pairs} zero-cost plan pairs contribute no gradient");
    }
    let grad_value = weighted_outer * &param.l;
    let grad = match param.p {
        1 => grad_value,
        _ if value == T::zero() => DMatrix::zeros(d, d),
        k => {
            let kf = T::from_count(k as usize);
            let outer = value.powf(T::one() / kf - T::one()) / kf;
            grad_value * outer
        }
    };
    Ok(lower_triangle(&grad))
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrtm_psd<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput("sqrtm_psd needs a square matrix".into()));
    }
    let asym = asymmetry(m);
    if asym > T::lit(1e-10) * (T::one() + m.amax()) {
        return Err(Error::NonSymmetric { asym: asym.as_f64() });
    }
    if m.iter().any(|v| !v.is_finite_val()) {
        return Err(Error::NonFinite("sqrtm_psd"));
    }
    let (vals, vecs) = sym_eigen(m);
    Ok(spectral_map(&vals, &vecs, |l| l.max(T::zero()).sqrt()))
}

/// Solves `X S + S X = RHS` for symmetric positive definite `S`.
pub fn lyapunov_solve<T: Real>(s: &DMatrix<T>, rhs: &DMatrix<T>) -> Result<DMatrix<T>> {
    let d = s.nrows();
    check_len("lyapunov S", d, s.ncols())?;
    check_len("lyapunov rhs rows", d, rhs.nrows())?;
    check_len("lyapunov rhs cols", d, rhs.ncols())?;
    let (vals, vecs) = sym_eigen(s);
    let mut min_sum = T::max_value().unwrap_or_else(|| T::lit(f64::MAX));
    for i in 0..d {
        for j in 0..d {
            min_sum = min_sum.min(vals[i] + vals[j]);
        }
    }
    if min_sum <= T::lit(1e-12) {
        return Err(Error::SingularPencil { min_sum: min_sum.as_f64() });
    }
    let mut x = vecs.transpose() * rhs * &vecs;
    for i in 0..d {
        for j in 0..d {
            x[(i, j)] /= vals[i] + vals[j];
        }
    }
    Ok(&vecs * x * vecs.transpose())
}

fn check_moments<T: Real>(a: &GaussianMoments<T>, b: &GaussianMoments<T>, param: &TransportParam<T>) -> Result<()> {
    check_len("moments dimension", param.dim(), a.dim())?;
    check_len("moments dimension", param.dim(), b.dim())?;
    if param.p != 2 {
        return Err(Error::InvalidInput("Gelbrich distance uses cost order p = 2".into()));
    }
    Ok(())
}

/// `L`-independent pieces of `g²(L) = Tr(C LLᵀ) − 2 Tr √(B LLᵀ Σ_Q LLᵀ B)`
/// for a fixed pair, with `C = ΔμΔμᵀ + Σ_Q + Σ_P`, `B = Σ_P^{1/2}` and
/// `A = Σ_Q^{1/2}`. Both covariances get `ridge·I` first.
///
/// `a` plays the role of the reference `(μ_P, Σ_P)` and `b` of `(μ_Q, Σ_Q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GelbrichPair<T: Real> {
    c: DMatrix<T>,
    b: DMatrix<T>,
    a: DMatrix<T>,
}

impl<T: Real> GelbrichPair<T> {
    pub fn new(a: &GaussianMoments<T>, b: &GaussianMoments<T>, ridge: T) -> Result<Self> {
        check_len("moments dimension", a.dim(), b.dim())?;
        let d = a.dim();
        let eye = DMatrix::<T>::identity(d, d);
        let sig_p = &a.cov + &eye * ridge;
        let sig_q = &b.cov + &eye * ridge;
        let dmu = &b.mean - &a.mean;
        Ok(GelbrichPair {
            c: &dmu * dmu.transpose() + &sig_q + &sig_p,
            b: sqrtm_psd(&sig_p)?,
            a: sqrtm_psd(&sig_q)?,
        })
    }

    fn check(&self, param: &TransportParam<T>) -> Result<()> {
        check_len("moments dimension", param.dim(), self.c.nrows())?;
        if param.p != 2 {
            return Err(Error::InvalidInput("Gelbrich distance uses cost order p = 2".into()));
        }
        Ok(())
    }

    pub fn distance(&self, param: &TransportParam<T>) -> Result<T> {
        Ok(self.point(param)?.distance)
    }

    /// Distance and, when asked, its gradient in `L` (lower triangle).
    pub fn evaluate(&self, param: &TransportParam<T>, with_gradient: bool) -> Result<(T, Option<DMatrix<T>>)> {
        let pt = self.point(param)?;
        let grad = if with_gradient {
            Some(self.gradient(&pt, param)?)
        } else {
            None
        };
        Ok((pt.distance, grad))
    }

    /// Forward pass, keeping what the gradient needs.
    pub fn point(&self, param: &TransportParam<T>) -> Result<GelbrichPoint<T>> {
        self.check(param)?;
        let h1 = param.metric();
        let p = &self.b * &h1 * &self.a;
        let h2 = p.clone() * p.transpose();
        let h2 = (&h2 + h2.transpose()) * T::lit(0.5);
        if h2.iter().any(|v| !v.is_finite_val()) {
            return Err(Error::NonFinite("gelbrich_distance"));
        }
        let (vals, vecs) = sym_eigen(&h2);
        let roots = vals.map(|l| l.max(T::zero()).sqrt());
        let squared = (&self.c * &h1).trace() - T::lit(2.0) * roots.sum();
        let distance = squared.max(T::zero()).sqrt();
        if !distance.is_finite_val() {
            return Err(Error::NonFinite("gelbrich_distance"));
        }
        Ok(GelbrichPoint {
            distance,
            p,
            roots,
            vecs,
        })
    }

    /// Reverse pass through `L ↦ LLᵀ ↦ B·LLᵀ·A ↦ PPᵀ ↦ √· ↦ Tr`. The square-root
    /// step needs `G S + S G = I`, which is diagonal in the eigenbasis of
    /// `S = √(PPᵀ)`.
    pub fn gradient(&self, pt: &GelbrichPoint<T>, param: &TransportParam<T>) -> Result<DMatrix<T>> {
        let d = param.dim();
        let g = pt.distance;
        if g == T::zero() {
            return Ok(DMatrix::zeros(d, d));
        }
        let min_root = pt.roots.min();
        if min_root * T::lit(2.0) <= T::lit(1e-12) {
            return Err(Error::SingularSqrt {
                min_eig: min_root.as_f64(),
            });
        }
        // G = V diag(1/(2 s_i)) Vᵀ.
        let g2 = spectral_map(&pt.roots, &pt.vecs, |s| T::one() / (T::lit(2.0) * s));
        let pbar = (&g2 + g2.transpose()) * &pt.p;
        let h1bar = &self.b * pbar * &self.a;
        let lbar = (&h1bar + h1bar.transpose()) * param.l();
        let dh = (&self.c + self.c.transpose()) * param.l() - lbar * T::lit(2.0);
        Ok(lower_triangle(&(dh / (T::lit(2.0) * g))))
    }
}

/// Forward state of [`GelbrichPair::point`].
#[derive(Clone, Debug)]
pub struct GelbrichPoint<T: Real> {
    pub distance: T,
    p: DMatrix<T>,
    roots: DVector<T>,
    vecs: DMatrix<T>,
}

/// Ridge applied to both covariances when differentiating, so the matrix
/// square roots stay differentiable.
pub const GELBRICH_GRAD_RIDGE: f64 = 1e-10;

/// Parametrized Gelbrich distance between two mean-covariance pairs.
pub fn gelbrich_distance<T: Real>(
    a: &GaussianMoments<T>,
    b: &GaussianMoments<T>,
    param: &TransportParam<T>,
) -> Result<T> {
    check_moments(a, b, param)?;
    GelbrichPair::new(a, b, T::zero())?.distance(param)
}

/// Gradient of the Gelbrich distance in `L`, restricted to the lower triangle.
pub fn gelbrich_gradient<T: Real>(
    a: &GaussianMoments<T>,
    b: &GaussianMoments<T>,
    param: &TransportParam<T>,
) -> Result<DMatrix<T>> {
    check_moments(a, b, param)?;
    let (_, grad) = GelbrichPair::new(a, b, T::lit(GELBRICH_GRAD_RIDGE))?.evaluate(param, true)?;
    Ok(grad.expect("gradient requested"))
}

/// JSON form of a distribution for the command line.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DistributionFile {
    Discrete { points: Vec<Vec<f64>>, weights: Vec<f64> },
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

/// JSON form of a transport parameter: `{"L": [[...]], "p": 1}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamFile {
    #[serde(rename = "L")]
    pub l: Vec<Vec<f64>>,
    #[serde(default = "default_order")]
    pub p: u32,
}

fn default_order() -> u32 {
    1
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], context: &'static str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    for row in rows {
        check_len(context, c, row.len())?;
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl ParamFile {
    pub fn to_param(&self) -> Result<TransportParam<f64>> {
        TransportParam::new(matrix_from_rows(&self.l, "L rows")?, self.p)
    }

    pub fn from_param(param: &TransportParam<f64>) -> Self {
        ParamFile {
            l: matrix_to_rows(param.l()),
            p: param.p(),
        }
    }
}
