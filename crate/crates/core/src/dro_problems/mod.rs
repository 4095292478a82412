//! Conic reformulations of the OT-DRO problems and the contraction of
//! conic-data sensitivities into gradients with respect to `L`.
//!
//! Every builder places `L` with coefficient `+1` in a single `d×d` block of
//! `A`; [`ProblemInstance::l_block`] records its top-left corner, which is all
//! [`parameter_gradient`] needs.

mod builders;
mod gaussian;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic_diff::DataGradient;
use crate::conic_solver::ConicProblemData;
use crate::error::{check_len, Error, Result};
use crate::linalg::lower_triangle;
use crate::scalar::Real;
use crate::transport_metrics::TransportParam;

pub use builders::{
    build_linreg_abs, build_linreg_sq, build_portfolio_gaussian, build_portfolio_type1, build_portfolio_type2,
    closed_form_linreg_abs, closed_form_linreg_sq,
};
pub use gaussian::{
    closed_form_gaussian_objective, nominal_gaussian_cvar, norm_inv_metric, risk_coefficient, standard_normal_pdf,
    standard_normal_quantile, worst_case_moments,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BuilderId {
    PortfolioT1,
    PortfolioT2,
    PortfolioGaussian,
    RegressionAbs,
    RegressionSq,
}

impl BuilderId {
    /// Transport cost order the reformulation is derived for.
    pub fn order(self) -> u32 {
        match self {
            BuilderId::PortfolioT1 | BuilderId::RegressionAbs => 1,
            _ => 2,
        }
    }

    pub fn is_regression(self) -> bool {
        matches!(self, BuilderId::RegressionAbs | BuilderId::RegressionSq)
    }
}

/// Named, disjoint slices of the conic variable `x`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VariableMap {
    entries: Vec<(&'static str, Range<usize>)>,
}

impl VariableMap {
    fn from_sizes(sizes: &[(&'static str, usize)]) -> Self {
        let mut off = 0;
        let entries = sizes
            .iter()
            .map(|&(name, len)| {
                let r = off..off + len;
                off += len;
                (name, r)
            })
            .collect();
        VariableMap { entries }
    }

    pub fn get(&self, name: &str) -> Option<Range<usize>> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, r)| r.clone())
    }

    pub fn entries(&self) -> &[(&'static str, Range<usize>)] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |(_, r)| r.end)
    }

    fn slice<T: Real>(&self, name: &str, x: &DVector<T>) -> DVector<T> {
        let r = self.get(name).expect("builder declares the variable");
        x.rows(r.start, r.len()).clone_owned()
    }
}

/// Samples as rows. For regression the last column is the response and the
/// leading `k = d − 1` columns are the features.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetView<T: Real> {
    samples: DMatrix<T>,
}

impl<T: Real> DatasetView<T> {
    pub fn new(samples: DMatrix<T>) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::InvalidInput("dataset must be nonempty".into()));
        }
        if samples.iter().any(|v| !v.is_finite_val()) {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(DatasetView { samples })
    }

    /// Regression data from features `X` (J×k) and responses `y`.
    pub fn from_regression(x: &DMatrix<T>, y: &DVector<T>) -> Result<Self> {
        check_len("regression responses", x.nrows(), y.len())?;
        let (j, k) = x.shape();
        let mut s = DMatrix::zeros(j, k + 1);
        s.view_mut((0, 0), (j, k)).copy_from(x);
        s.column_mut(k).copy_from(y);
        Self::new(s)
    }

    pub fn samples(&self) -> &DMatrix<T> {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn mean(&self) -> DVector<T> {
        let j = T::from_count(self.len());
        self.samples.row_sum().transpose() / j
    }

    pub fn features(&self) -> DMatrix<T> {
        let (j, d) = self.samples.shape();
        self.samples.view((0, 0), (j, d - 1)).clone_owned()
    }

    pub fn responses(&self) -> DVector<T> {
        self.samples.column(self.dim() - 1).clone_owned()
    }
}

/// A built conic program together with the bookkeeping needed to read off
/// the decision and differentiate with respect to `L`.
#[derive(Clone, Debug)]
pub struct ProblemInstance<T: Real> {
    pub conic: ConicProblemData<T>,
    pub variable_map: VariableMap,
    pub builder: BuilderId,
    /// `(d, p)`.
    pub theta_shape: (usize, u32),
    /// Top-left `(row, col)` of the `+L` block in `A`.
    pub l_block: (usize, usize),
}

impl<T: Real> ProblemInstance<T> {
    /// The decision `w` extracted from a conic solution.
    pub fn decision(&self, x: &DVector<T>) -> DVector<T> {
        match self.builder {
            BuilderId::RegressionSq => {
                let v = self.variable_map.slice("v", x);
                -v.rows(0, v.len() - 1)
            }
            _ => self.variable_map.slice("w", x),
        }
    }

    /// Worst-case objective reported for the optimal conic value `cᵀx`.
    ///
    /// The squared-loss regression optimizes the square root of the
    /// worst-case expectation, so its value is squared here.
    pub fn reported_objective(&self, conic_value: T) -> T {
        match self.builder {
            BuilderId::RegressionSq => conic_value * conic_value,
            _ => conic_value,
        }
    }

    /// Derivative of [`Self::reported_objective`] in the conic value.
    pub fn reported_objective_slope(&self, conic_value: T) -> T {
        match self.builder {
            BuilderId::RegressionSq => T::lit(2.0) * conic_value,
            _ => T::one(),
        }
    }

    /// Writes a new `L` into its block in place.
    pub fn set_l(&mut self, l: &DMatrix<T>) -> Result<()> {
        let d = self.theta_shape.0;
        check_len("L rows", d, l.nrows())?;
        check_len("L cols", d, l.ncols())?;
        let (r, c) = self.l_block;
        self.conic.a.view_mut((r, c), (d, d)).copy_from(l);
        Ok(())
    }
}

/// Contracts an adjoint data gradient with `∂A/∂L`, returning the lower
/// triangle of `∂/∂L`.
///
/// `c` and `b` do not depend on `L` in any builder (the radius is held fixed),
/// so only the `L` block of `dA` contributes.
pub fn parameter_gradient<T: Real>(
    instance: &ProblemInstance<T>,
    adjoint: &DataGradient<T>,
    param: &TransportParam<T>,
) -> Result<DMatrix<T>> {
    let (d, p) = instance.theta_shape;
    let (m, n) = instance.conic.a.shape();
    if adjoint.da.shape() != (m, n) || param.dim() != d || param.p() != p {
        return Err(Error::InvalidInput("adjoint or parameter does not match the instance".into()));
    }
    let (r, c) = instance.l_block;
    Ok(lower_triangle(&adjoint.da.view((r, c), (d, d)).clone_owned()))
}

pub(crate) fn check_radius<T: Real>(eps: T) -> Result<()> {
    if eps >= T::zero() && eps.is_finite_val() {
        Ok(())
    } else {
        Err(Error::InvalidInput("radius must be finite and nonnegative".into()))
    }
}

pub(crate) fn check_param<T: Real>(param: &TransportParam<T>, d: usize, order: u32) -> Result<()> {
    check_len("L dimension", d, param.dim())?;
    if param.p() != order {
        return Err(Error::InvalidInput(format!(
            "this reformulation needs cost order p = {order}, got {}",
            param.p()
        )));
    }
    Ok(())
}
