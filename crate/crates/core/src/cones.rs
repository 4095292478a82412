//! Cone blocks, Euclidean projections and projection Jacobians.
//!
//! Second-order cone blocks use the layout `(t, x)` with `‖x‖ ≤ t`.

use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConeKind {
    Zero,
    #[serde(rename = "nonneg")]
    NonNegative,
    #[serde(rename = "soc")]
    SecondOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConeBlock {
    pub kind: ConeKind,
    pub dim: usize,
}

impl ConeBlock {
    pub fn new(kind: ConeKind, dim: usize) -> Result<Self> {
        let min = match kind {
            ConeKind::SecondOrder => 2,
            _ => 1,
        };
        if dim < min {
            return Err(Error::InvalidInput(format!(
                "{kind:?} cone needs dim >= {min}, got {dim}"
            )));
        }
        Ok(ConeBlock { kind, dim })
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(ConeKind::Zero, dim).expect("zero cone dim >= 1")
    }

    pub fn nonneg(dim: usize) -> Self {
        Self::new(ConeKind::NonNegative, dim).expect("nonneg cone dim >= 1")
    }

    pub fn soc(dim: usize) -> Self {
        Self::new(ConeKind::SecondOrder, dim).expect("soc dim >= 2")
    }
}

/// Ordered product of cone blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ConeBlock>", into = "Vec<ConeBlock>")]
pub struct ConeSpec {
    blocks: Vec<ConeBlock>,
    total_dim: usize,
}

impl TryFrom<Vec<ConeBlock>> for ConeSpec {
    type Error = Error;
    fn try_from(blocks: Vec<ConeBlock>) -> Result<Self> {
        ConeSpec::new(blocks)
    }
}

impl From<ConeSpec> for Vec<ConeBlock> {
    fn from(spec: ConeSpec) -> Self {
        spec.blocks
    }
}

impl ConeSpec {
    pub fn new(blocks: Vec<ConeBlock>) -> Result<Self> {
        for b in &blocks {
            ConeBlock::new(b.kind, b.dim)?;
        }
        let total_dim = blocks.iter().map(|b| b.dim).sum();
        Ok(ConeSpec { blocks, total_dim })
    }

    pub fn blocks(&self) -> &[ConeBlock] {
        &self.blocks
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// `(offset, block)` pairs in order.
    pub fn offsets(&self) -> impl Iterator<Item = (usize, ConeBlock)> + '_ {
        self.blocks.iter().scan(0usize, |off, b| {
            let start = *off;
            *off += b.dim;
            Some((start, *b))
        })
    }

    /// Row indices belonging to Zero blocks.
    pub fn is_zero_row(&self) -> Vec<bool> {
        let mut out = vec![false; self.total_dim];
        for (off, b) in self.offsets() {
            if b.kind == ConeKind::Zero {
                out[off..off + b.dim].iter_mut().for_each(|f| *f = true);
            }
        }
        out
    }
}

fn soc_project_in_place<T: Real>(mut v: DVectorViewMut<'_, T>) {
    let t = v[0];
    let nx = v.rows(1, v.len() - 1).norm();
    if nx <= t {
        return;
    }
    if nx <= -t {
        v.fill(T::zero());
        return;
    }
    let half = T::lit(0.5) * (t + nx);
    v[0] = half;
    let scale = half / nx;
    v.rows_mut(1, v.len() - 1).scale_mut(scale);
}

/// Projects in place onto the primal cone `K`.
pub fn project_primal_in_place<T: Real>(spec: &ConeSpec, v: &mut DVector<T>) {
    for (off, b) in spec.offsets() {
        let mut blk = v.rows_mut(off, b.dim);
        match b.kind {
            ConeKind::Zero => blk.fill(T::zero()),
            ConeKind::NonNegative => blk.apply(|x| *x = x.max(T::zero())),
            ConeKind::SecondOrder => soc_project_in_place(blk),
        }
    }
}

/// Projects in place onto the dual cone `K*`.
pub fn project_dual_in_place<T: Real>(spec: &ConeSpec, v: &mut DVector<T>) {
    for (off, b) in spec.offsets() {
        let mut blk = v.rows_mut(off, b.dim);
        match b.kind {
            ConeKind::Zero => {}
            ConeKind::NonNegative => blk.apply(|x| *x = x.max(T::zero())),
            ConeKind::SecondOrder => soc_project_in_place(blk),
        }
    }
}

pub fn project_primal<T: Real>(spec: &ConeSpec, v: &DVector<T>) -> Result<DVector<T>> {
    check_len("project_primal", spec.total_dim(), v.len())?;
    let mut out = v.clone();
    project_primal_in_place(spec, &mut out);
    Ok(out)
}

pub fn project_dual<T: Real>(spec: &ConeSpec, v: &DVector<T>) -> Result<DVector<T>> {
    check_len("project_dual", spec.total_dim(), v.len())?;
    let mut out = v.clone();
    project_dual_in_place(spec, &mut out);
    Ok(out)
}

/// Projection onto the polar cone `K° = −K*`.
pub fn project_polar<T: Real>(spec: &ConeSpec, v: &DVector<T>) -> Result<DVector<T>> {
    let neg = -v;
    Ok(-project_dual(spec, &neg)?)
}

fn soc_jacobian<T: Real>(v: DVectorView<'_, T>) -> DMatrix<T> {
    let d = v.len();
    let t = v[0];
    let x = v.rows(1, d - 1);
    let nx = x.norm();
    if nx == T::zero() && t == T::zero() {
        return DMatrix::identity(d, d) * T::lit(0.5);
    }
    if nx <= t {
        return DMatrix::identity(d, d);
    }
    if nx <= -t {
        return DMatrix::zeros(d, d);
    }
    let half = T::lit(0.5);
    let xbar = x / nx;
    let ratio = t / nx;
    let mut j = DMatrix::zeros(d, d);
    j[(0, 0)] = half;
    for i in 0..d - 1 {
        j[(0, i + 1)] = half * xbar[i];
        j[(i + 1, 0)] = half * xbar[i];
        for k in 0..d - 1 {
            let delta = if i == k { T::one() + ratio } else { T::zero() };
            j[(i + 1, k + 1)] = half * (delta - ratio * xbar[i] * xbar[k]);
        }
    }
    j
}

/// One element of the conservative Jacobian of `project_dual` at `v`.
///
/// Ties resolve to the limit from the cone interior: a NonNegative entry at 0
/// gets 1, an SOC point with `‖x‖ = t > 0` gets the identity. The SOC apex
/// gets `½·I`; a point with `‖x‖ = −t > 0` maps to the apex and gets 0.
pub fn projection_jacobian_dual<T: Real>(spec: &ConeSpec, v: &DVector<T>) -> Result<DMatrix<T>> {
    let m = spec.total_dim();
    check_len("projection_jacobian_dual", m, v.len())?;
    let mut j = DMatrix::zeros(m, m);
    for (off, b) in spec.offsets() {
        match b.kind {
            ConeKind::Zero => {
                for i in off..off + b.dim {
                    j[(i, i)] = T::one();
                }
            }
            ConeKind::NonNegative => {
                for i in off..off + b.dim {
                    j[(i, i)] = if v[i] >= T::zero() { T::one() } else { T::zero() };
                }
            }
            ConeKind::SecondOrder => {
                let blk = soc_jacobian(v.rows(off, b.dim));
                j.view_mut((off, off), (b.dim, b.dim)).copy_from(&blk);
            }
        }
    }
    Ok(j)
}

fn soc_violation<T: Real>(v: DVectorView<'_, T>) -> T {
    (v.rows(1, v.len() - 1).norm() - v[0]).max(T::zero())
}

/// Largest violation of the defining inequalities of `K`.
pub fn primal_violation<T: Real>(spec: &ConeSpec, v: &DVector<T>) -> T {
    let mut worst = T::zero();
    for (off, b) in spec.offsets() {
        let blk = v.rows(off, b.dim);
        let viol = match b.kind {
            ConeKind::Zero => blk.amax(),
            ConeKind::NonNegative => blk.iter().fold(T::zero(), |a, x| a.max(-*x)),
            ConeKind::SecondOrder => soc_violation(blk),
        };
        worst = worst.max(viol);
    }
    worst
}

/// Largest violation of the defining inequalities of `K*`.
pub fn dual_violation<T: Real>(spec: &ConeSpec, v: &DVector<T>) -> T {
    let mut worst = T::zero();
    for (off, b) in spec.offsets() {
        let blk = v.rows(off, b.dim);
        let viol = match b.kind {
            ConeKind::Zero => T::zero(),
            ConeKind::NonNegative => blk.iter().fold(T::zero(), |a, x| a.max(-*x)),
            ConeKind::SecondOrder => soc_violation(blk),
        };
        worst = worst.max(viol);
    }
    worst
}

pub fn in_primal<T: Real>(spec: &ConeSpec, v: &DVector<T>, tol: T) -> bool {
    v.len() == spec.total_dim() && primal_violation(spec, v) <= tol
}

pub fn in_dual<T: Real>(spec: &ConeSpec, v: &DVector<T>, tol: T) -> bool {
    v.len() == spec.total_dim() && dual_violation(spec, v) <= tol
}
