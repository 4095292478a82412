//! Dense standard-form builders. Each one documents the variable order and
//! the row layout of `A`; the `+L` block location is returned in the instance.

use nalgebra::{DMatrix, DVector};

use super::gaussian::{norm_inv_metric, risk_coefficient};
use super::{check_param, check_radius, BuilderId, DatasetView, ProblemInstance, VariableMap};
use crate::cones::{ConeBlock, ConeSpec};
use crate::conic_solver::ConicProblemData;
use crate::error::{check_len, Result};
use crate::scalar::Real;
use crate::transport_metrics::{sqrtm_psd, GaussianMoments, TransportParam};

fn set_identity<T: Real>(a: &mut DMatrix<T>, row: usize, col: usize, n: usize, coef: T) {
    for i in 0..n {
        a[(row + i, col + i)] = coef;
    }
}

fn finish<T: Real>(
    a: DMatrix<T>,
    b: DVector<T>,
    c: DVector<T>,
    cones: Vec<ConeBlock>,
    variable_map: VariableMap,
    builder: BuilderId,
    d: usize,
    l_block: (usize, usize),
) -> Result<ProblemInstance<T>> {
    let cone = ConeSpec::new(cones.into_iter().filter(|b| b.dim > 0).collect())?;
    Ok(ProblemInstance {
        conic: ConicProblemData::new(a, b, c, cone)?,
        variable_map,
        builder,
        theta_shape: (d, builder.order()),
        l_block,
    })
}

/// Expected-loss portfolio under a type-1 cost.
///
/// `x = (w, λ, u)`, rows: budget `1ᵀw = 1`; `Lu = w`; `w ≥ 0`;
/// `(λ, u) ∈ SOC`. Objective `λε − mean(ξ̂)ᵀw`.
pub fn build_portfolio_type1<T: Real>(
    data: &DatasetView<T>,
    eps: T,
    param: &TransportParam<T>,
) -> Result<ProblemInstance<T>> {
    check_radius(eps)?;
    let k = data.dim();
    check_param(param, k, 1)?;
    let n = 2 * k + 1;
    let m = 3 * k + 2;
    let (lam, u) = (k, k + 1);
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    a.view_mut((0, 0), (1, k)).fill(T::one());
    b[0] = T::one();
    set_identity(&mut a, 1, 0, k, -T::one());
    a.view_mut((1, u), (k, k)).copy_from(param.l());
    set_identity(&mut a, k + 1, 0, k, -T::one());
    a[(2 * k + 1, lam)] = -T::one();
    set_identity(&mut a, 2 * k + 2, u, k, -T::one());

    let mut c = DVector::zeros(n);
    c.rows_mut(0, k).copy_from(&(-data.mean()));
    c[lam] = eps;
    finish(
        a,
        b,
        c,
        vec![ConeBlock::zero(1), ConeBlock::zero(k), ConeBlock::nonneg(k), ConeBlock::soc(k + 1)],
        VariableMap::from_sizes(&[("w", k), ("lambda", 1), ("u", k)]),
        BuilderId::PortfolioT1,
        k,
        (1, u),
    )
}

/// Expected-loss portfolio under a type-2 cost.
///
/// `x = (t₁…t_J, w, λ, z)`, rows: budget; `Lz = w`; `w ≥ 0`; `λ ≥ 0`; for each
/// sample the rotated cone `‖(2z, 4λ − tⱼ)‖ ≤ 4λ + tⱼ`. Objective
/// `(1/J)Σ tⱼ − mean(ξ̂)ᵀw + ε²λ`.
pub fn build_portfolio_type2<T: Real>(
    data: &DatasetView<T>,
    eps: T,
    param: &TransportParam<T>,
) -> Result<ProblemInstance<T>> {
    check_radius(eps)?;
    let k = data.dim();
    let j = data.len();
    check_param(param, k, 2)?;
    let (w, lam, z) = (j, j + k, j + k + 1);
    let n = j + 2 * k + 1;
    let m = 1 + k + k + 1 + j * (k + 2);
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    a.view_mut((0, w), (1, k)).fill(T::one());
    b[0] = T::one();
    set_identity(&mut a, 1, w, k, -T::one());
    a.view_mut((1, z), (k, k)).copy_from(param.l());
    set_identity(&mut a, 1 + k, w, k, -T::one());
    a[(1 + 2 * k, lam)] = -T::one();
    let four = T::lit(4.0);
    for s in 0..j {
        let r = 2 + 2 * k + s * (k + 2);
        a[(r, s)] = -T::one();
        a[(r, lam)] = -four;
        set_identity(&mut a, r + 1, z, k, T::lit(-2.0));
        a[(r + k + 1, s)] = T::one();
        a[(r + k + 1, lam)] = -four;
    }

    let mut c = DVector::zeros(n);
    c.rows_mut(0, j).fill(T::one() / T::from_count(j));
    c.rows_mut(w, k).copy_from(&(-data.mean()));
    c[lam] = eps * eps;
    let mut cones = vec![ConeBlock::zero(1 + k), ConeBlock::nonneg(k + 1)];
    cones.extend((0..j).map(|_| ConeBlock::soc(k + 2)));
    finish(
        a,
        b,
        c,
        cones,
        VariableMap::from_sizes(&[("t", j), ("w", k), ("lambda", 1), ("z", k)]),
        BuilderId::PortfolioT2,
        k,
        (1, z),
    )
}

/// Gaussian CVaR portfolio over a Gelbrich ball.
///
/// `x = (w, u, v, q)`, rows: budget; `Lq = w`; `w ≥ 0`; `‖√Σ̂ w‖ ≤ u`;
/// `‖q‖ ≤ v`. Objective `−μ̂ᵀw + αu + ε√(1+α²)v`.
pub fn build_portfolio_gaussian<T: Real>(
    mom: &GaussianMoments<T>,
    eps: T,
    gamma: f64,
    param: &TransportParam<T>,
) -> Result<ProblemInstance<T>> {
    check_radius(eps)?;
    let k = mom.dim();
    check_param(param, k, 2)?;
    let alpha = T::lit(risk_coefficient(gamma)?);
    let root = sqrtm_psd(&mom.cov)?;
    let (u, v, q) = (k, k + 1, k + 2);
    let n = 2 * k + 2;
    let m = 4 * k + 3;
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    a.view_mut((0, 0), (1, k)).fill(T::one());
    b[0] = T::one();
    set_identity(&mut a, 1, 0, k, -T::one());
    a.view_mut((1, q), (k, k)).copy_from(param.l());
    set_identity(&mut a, k + 1, 0, k, -T::one());
    a[(2 * k + 1, u)] = -T::one();
    a.view_mut((2 * k + 2, 0), (k, k)).copy_from(&(-root));
    a[(3 * k + 2, v)] = -T::one();
    set_identity(&mut a, 3 * k + 3, q, k, -T::one());

    let mut c = DVector::zeros(n);
    c.rows_mut(0, k).copy_from(&(-&mom.mean));
    c[u] = alpha;
    c[v] = eps * (T::one() + alpha * alpha).sqrt();
    finish(
        a,
        b,
        c,
        vec![ConeBlock::zero(1 + k), ConeBlock::nonneg(k), ConeBlock::soc(k + 1), ConeBlock::soc(k + 1)],
        VariableMap::from_sizes(&[("w", k), ("u", 1), ("v", 1), ("q", k)]),
        BuilderId::PortfolioGaussian,
        k,
        (1, q),
    )
}

/// Least-absolute-deviation regression under a type-1 cost on `ξ = (x, y)`.
///
/// `x = (v₁…v_J, u, z, w)`, rows: `Lz + (w, 0) = e_d`; `vⱼ ≥ yⱼ − xⱼᵀw`;
/// `vⱼ ≥ xⱼᵀw − yⱼ`; `‖z‖ ≤ u`. Objective `(1/J)Σ vⱼ + εu`.
pub fn build_linreg_abs<T: Real>(
    data: &DatasetView<T>,
    eps: T,
    param: &TransportParam<T>,
) -> Result<ProblemInstance<T>> {
    check_radius(eps)?;
    let d = data.dim();
    let j = data.len();
    check_param(param, d, 1)?;
    if d < 2 {
        return Err(crate::Error::InvalidInput("regression needs at least one feature".into()));
    }
    let k = d - 1;
    let x_feat = data.features();
    let y = data.responses();
    let (u, z, w) = (j, j + 1, j + 1 + d);
    let n = j + 1 + d + k;
    let m = d + 2 * j + d + 1;
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    a.view_mut((0, z), (d, d)).copy_from(param.l());
    set_identity(&mut a, 0, w, k, T::one());
    b[d - 1] = T::one();
    set_identity(&mut a, d, 0, j, -T::one());
    a.view_mut((d, w), (j, k)).copy_from(&(-&x_feat));
    b.rows_mut(d, j).copy_from(&(-&y));
    set_identity(&mut a, d + j, 0, j, -T::one());
    a.view_mut((d + j, w), (j, k)).copy_from(&x_feat);
    b.rows_mut(d + j, j).copy_from(&y);
    let r = d + 2 * j;
    a[(r, u)] = -T::one();
    set_identity(&mut a, r + 1, z, d, -T::one());

    let mut c = DVector::zeros(n);
    c.rows_mut(0, j).fill(T::one() / T::from_count(j));
    c[u] = eps;
    finish(
        a,
        b,
        c,
        vec![ConeBlock::zero(d), ConeBlock::nonneg(2 * j), ConeBlock::soc(d + 1)],
        VariableMap::from_sizes(&[("v", j), ("u", 1), ("z", d), ("w", k)]),
        BuilderId::RegressionAbs,
        d,
        (0, z),
    )
}

/// Least-squares regression under a type-2 cost, in square-root form.
///
/// `x = (v, λ, a, z, q)` with `v = (−w, 1)`, rows: `Lq = v`; `v_d = 1`;
/// `a = [X y] v`; `‖a‖ ≤ λ`; `‖q‖ ≤ z`. Objective `λ/√J + εz`, whose square
/// is the worst-case mean squared error.
pub fn build_linreg_sq<T: Real>(
    data: &DatasetView<T>,
    eps: T,
    param: &TransportParam<T>,
) -> Result<ProblemInstance<T>> {
    check_radius(eps)?;
    let d = data.dim();
    let j = data.len();
    check_param(param, d, 2)?;
    if d < 2 {
        return Err(crate::Error::InvalidInput("regression needs at least one feature".into()));
    }
    let (lam, av, z, q) = (d, d + 1, d + 1 + j, d + 2 + j);
    let n = 2 * d + j + 2;
    let m = d + 1 + j + (j + 1) + (d + 1);
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    set_identity(&mut a, 0, 0, d, -T::one());
    a.view_mut((0, q), (d, d)).copy_from(param.l());
    a[(d, d - 1)] = T::one();
    b[d] = T::one();
    a.view_mut((d + 1, 0), (j, d)).copy_from(data.samples());
    set_identity(&mut a, d + 1, av, j, -T::one());
    let r1 = d + 1 + j;
    a[(r1, lam)] = -T::one();
    set_identity(&mut a, r1 + 1, av, j, -T::one());
    let r2 = r1 + j + 1;
    a[(r2, z)] = -T::one();
    set_identity(&mut a, r2 + 1, q, d, -T::one());

    let mut c = DVector::zeros(n);
    c[lam] = T::one() / T::from_count(j).sqrt();
    c[z] = eps;
    finish(
        a,
        b,
        c,
        vec![ConeBlock::zero(d + 1 + j), ConeBlock::soc(j + 1), ConeBlock::soc(d + 1)],
        VariableMap::from_sizes(&[("v", d), ("lambda", 1), ("a", j), ("z", 1), ("q", d)]),
        BuilderId::RegressionSq,
        d,
        (0, q),
    )
}

/// `(1/J)Σ |yⱼ − xⱼᵀw| + ε‖(−w, 1)‖_{(LLᵀ)⁻¹}`.
pub fn closed_form_linreg_abs<T: Real>(
    w: &DVector<T>,
    data: &DatasetView<T>,
    eps: T,
    param: &TransportParam<T>,
) -> Result<T> {
    let (resid, tail) = regression_parts(w, data, eps, param)?;
    Ok(resid.abs().mean() + tail)
}

/// `(√MSE + ε‖(−w, 1)‖_{(LLᵀ)⁻¹})²`.
pub fn closed_form_linreg_sq<T: Real>(
    w: &DVector<T>,
    data: &DatasetView<T>,
    eps: T,
    param: &TransportParam<T>,
) -> Result<T> {
    let (resid, tail) = regression_parts(w, data, eps, param)?;
    let root = (resid.norm_squared() / T::from_count(resid.len())).sqrt() + tail;
    Ok(root * root)
}

fn regression_parts<T: Real>(
    w: &DVector<T>,
    data: &DatasetView<T>,
    eps: T,
    param: &TransportParam<T>,
) -> Result<(DVector<T>, T)> {
    check_radius(eps)?;
    let d = data.dim();
    check_len("regression weights", d - 1, w.len())?;
    check_len("L dimension", d, param.dim())?;
    let resid = data.responses() - data.features() * w;
    let mut ext = -w.clone().resize_vertically(d, T::zero());
    ext[d - 1] = T::one();
    Ok((resid, eps * norm_inv_metric(&ext, param)?))
}
