//! Gaussian CVaR portfolio pieces: the risk coefficient, the moment-based
//! closed form and the worst-case moments attaining it.

use nalgebra::{DMatrix, DVector};

use super::check_radius;
use crate::error::{check_len, Error, Result};
use crate::scalar::Real;
use crate::transport_metrics::{GaussianMoments, TransportParam};

pub fn standard_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse standard normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9 on (0, 1)).
pub fn standard_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!("quantile level {p} outside (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    const LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    Ok(x)
}

/// `α = φ(Φ⁻¹(1 − γ)) / γ`, the CVaR multiplier of a standard normal at tail
/// level `γ`.
pub fn risk_coefficient(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidInput(format!("tail level {gamma} outside (0, 1)")));
    }
    Ok(standard_normal_pdf(standard_normal_quantile(1.0 - gamma)?) / gamma)
}

/// `‖w‖_{(LLᵀ)⁻¹} = ‖L⁻¹w‖`.
pub fn norm_inv_metric<T: Real>(w: &DVector<T>, param: &TransportParam<T>) -> Result<T> {
    check_len("weight dimension", param.dim(), w.len())?;
    Ok(solve_l(param, w)?.norm())
}

pub(crate) fn solve_l<T: Real>(param: &TransportParam<T>, v: &DVector<T>) -> Result<DVector<T>> {
    param
        .l()
        .solve_lower_triangular(v)
        .ok_or(Error::InvalidInput("L is singular".into()))
}

/// `−μᵀw + α√(wᵀΣw)`.
pub fn nominal_gaussian_cvar<T: Real>(w: &DVector<T>, mom: &GaussianMoments<T>, gamma: f64) -> Result<T> {
    check_len("weight dimension", mom.dim(), w.len())?;
    let alpha = T::lit(risk_coefficient(gamma)?);
    let quad = w.dot(&(&mom.cov * w)).max(T::zero());
    Ok(-mom.mean.dot(w) + alpha * quad.sqrt())
}

/// `−μ̂ᵀw + α√(wᵀΣ̂w) + ε√(1+α²)‖w‖_{(LLᵀ)⁻¹}`.
pub fn closed_form_gaussian_objective<T: Real>(
    w: &DVector<T>,
    mom: &GaussianMoments<T>,
    eps: T,
    gamma: f64,
    param: &TransportParam<T>,
) -> Result<T> {
    check_radius(eps)?;
    let alpha = risk_coefficient(gamma)?;
    let nominal = nominal_gaussian_cvar(w, mom, gamma)?;
    Ok(nominal + eps * T::lit((1.0 + alpha * alpha).sqrt()) * norm_inv_metric(w, param)?)
}

/// Moments of the worst-case Gaussian in the Gelbrich ball of radius `ρ`
/// around `mom` for the portfolio `w`.
///
/// Returns [`Error::ZeroRadius`] when `ρ = 0`; the worst case is then the
/// nominal pair itself.
pub fn worst_case_moments<T: Real>(
    w: &DVector<T>,
    mom: &GaussianMoments<T>,
    rho: T,
    gamma: f64,
    param: &TransportParam<T>,
) -> Result<GaussianMoments<T>> {
    check_radius(rho)?;
    let k = mom.dim();
    check_len("weight dimension", k, w.len())?;
    check_len("L dimension", k, param.dim())?;
    if rho == T::zero() {
        return Err(Error::ZeroRadius);
    }
    if w.iter().all(|v| *v == T::zero()) {
        return Err(Error::InvalidInput("worst-case moments need w != 0".into()));
    }
    let alpha = T::lit(risk_coefficient(gamma)?);
    let root = (T::one() + alpha * alpha).sqrt();
    // M⁻¹w = L⁻ᵀ L⁻¹ w.
    let lw = solve_l(param, w)?;
    let minv_w = param
        .l()
        .tr_solve_lower_triangular(&lw)
        .ok_or(Error::InvalidInput("L is singular".into()))?;
    let n2 = w.dot(&minv_w);
    let n = n2.sqrt();
    let mean = &mom.mean - &minv_w * (rho / (root * n));

    let gamma_s = root * n / (T::lit(2.0) * rho);
    let spread = w.dot(&(&mom.cov * w)).max(T::zero()).sqrt();
    let lambda_s = T::one() / (n2 / gamma_s + T::lit(2.0) / alpha * spread);
    let scale = lambda_s / (gamma_s - lambda_s * n2);
    let left = DMatrix::identity(k, k) + &minv_w * w.transpose() * scale;
    let cov = &left * &mom.cov * left.transpose();
    GaussianMoments::new(mean, (&cov + cov.transpose()) * T::lit(0.5))
}
