//! Dense linear-algebra helpers not provided directly by nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Householder QR with column-norm pivoting (Businger-Golub), `A P = Q R`.
///
/// Unlike `nalgebra::ColPivQR`, which pivots on the largest entry, this
/// pivots on the largest remaining column norm, so `|R_ii|` is nonincreasing
/// and `|R_00| / |R_kk|` is a usable condition estimate.
#[derive(Clone, Debug)]
pub struct PivotedQr<T: Real> {
    /// Upper triangle holds `R`; Householder vectors are kept separately.
    r: DMatrix<T>,
    householder: Vec<(DVector<T>, T)>,
    /// Column `i` of `A P` is column `perm[i]` of `A`.
    perm: Vec<usize>,
}

impl<T: Real> PivotedQr<T> {
    pub fn new(mut a: DMatrix<T>) -> Self {
        let (m, n) = a.shape();
        let steps = m.min(n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut householder = Vec::with_capacity(steps);

        for k in 0..steps {
            let mut best = k;
            let mut best_norm = -T::one();
            for j in k..n {
                let nrm = a.column(j).rows(k, m - k).norm_squared();
                if nrm > best_norm {
                    best_norm = nrm;
                    best = j;
                }
            }
            if best != k {
                a.swap_columns(k, best);
                perm.swap(k, best);
            }

            let x = a.column(k).rows(k, m - k).clone_owned();
            let norm_x = x.norm();
            if norm_x == T::zero() {
                householder.push((DVector::zeros(m - k), T::zero()));
                continue;
            }
            let x0 = x[0];
            let alpha = if x0 >= T::zero() { -norm_x } else { norm_x };
            let mut v = DVector::from_iterator(m - k, x.iter().copied());
            v[0] -= alpha;
            let vtv = v.norm_squared();
            let beta = if vtv > T::zero() {
                T::lit(2.0) / vtv
            } else {
                T::zero()
            };
            // Apply H = I - beta v v^T to the trailing block.
            for j in k..n {
                let mut col = a.column_mut(j);
                let mut tail = col.rows_mut(k, m - k);
                let dot = v.dot(&tail);
                tail.axpy(-beta * dot, &v, T::one());
            }
            householder.push((v, beta));
        }

        PivotedQr {
            r: a,
            householder,
            perm,
        }
    }

    pub fn ncols(&self) -> usize {
        self.r.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.r.nrows()
    }

    fn steps(&self) -> usize {
        self.householder.len()
    }

    /// `|R_00| / |R_kk|` with `k` the last diagonal index; infinite when the
    /// trailing pivot vanishes.
    pub fn condition_estimate(&self) -> f64 {
        let k = self.steps();
        if k == 0 {
            return 1.0;
        }
        let first = self.r[(0, 0)].abs().as_f64();
        let last = self.r[(k - 1, k - 1)].abs().as_f64();
        if last == 0.0 {
            f64::INFINITY
        } else {
            first / last
        }
    }

    /// Numerical rank with relative pivot threshold `rel_tol`.
    pub fn rank(&self, rel_tol: T) -> usize {
        let k = self.steps();
        if k == 0 {
            return 0;
        }
        let cutoff = self.r[(0, 0)].abs() * rel_tol;
        (0..k)
            .take_while(|&i| self.r[(i, i)].abs() > cutoff)
            .count()
    }

    fn apply_qt(&self, b: &mut DVector<T>) {
        for (k, (v, beta)) in self.householder.iter().enumerate() {
            let mut tail = b.rows_mut(k, v.len());
            let dot = v.dot(&tail);
            tail.axpy(-*beta * dot, v, T::one());
        }
    }

    fn apply_q(&self, b: &mut DVector<T>) {
        for (k, (v, beta)) in self.householder.iter().enumerate().rev() {
            let mut tail = b.rows_mut(k, v.len());
            let dot = v.dot(&tail);
            tail.axpy(-*beta * dot, v, T::one());
        }
    }

    /// Basic least-squares solution of `A x ≈ b` using the leading `rank`
    /// pivots; trailing components are set to zero.
    pub fn solve_truncated(&self, b: &DVector<T>, rank: usize) -> DVector<T> {
        let n = self.ncols();
        let mut y = b.clone();
        self.apply_qt(&mut y);
        let mut z = DVector::zeros(n);
        for i in (0..rank).rev() {
            let mut acc = y[i];
            for j in (i + 1)..rank {
                acc -= self.r[(i, j)] * z[j];
            }
            z[i] = acc / self.r[(i, i)];
        }
        let mut x = DVector::zeros(n);
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        x
    }

    /// Full-rank least-squares solve.
    pub fn solve(&self, b: &DVector<T>) -> DVector<T> {
        self.solve_truncated(b, self.steps())
    }

    /// Solves `A^T g = h` for square `A`.
    pub fn solve_transpose(&self, h: &DVector<T>) -> DVector<T> {
        let k = self.steps();
        let m = self.nrows();
        // A^T = P R^T Q^T  =>  R^T (Q^T g) = P^T h.
        let mut w = DVector::zeros(m);
        for i in 0..k {
            let mut acc = h[self.perm[i]];
            for j in 0..i {
                acc -= self.r[(j, i)] * w[j];
            }
            w[i] = acc / self.r[(i, i)];
        }
        self.apply_q(&mut w);
        w
    }
}

/// Ridge-regularized least squares: `argmin ‖A x − b‖² + ridge ‖x‖²`.
pub fn ridge_lstsq<T: Real>(a: &DMatrix<T>, b: &DVector<T>, ridge: T) -> DVector<T> {
    let (m, n) = a.shape();
    let mut aug = DMatrix::zeros(m + n, n);
    aug.view_mut((0, 0), (m, n)).copy_from(a);
    let s = ridge.sqrt();
    for i in 0..n {
        aug[(m + i, i)] = s;
    }
    let mut rhs = DVector::zeros(m + n);
    rhs.rows_mut(0, m).copy_from(b);
    PivotedQr::new(aug).solve(&rhs)
}

/// Max absolute asymmetry `max |M_ij − M_ji|`.
pub fn asymmetry<T: Real>(m: &DMatrix<T>) -> T {
    let n = m.nrows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Eigendecomposition of the symmetric part of `m`.
pub fn sym_eigen<T: Real>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    (eig.eigenvalues, eig.eigenvectors)
}

/// `V diag(f(λ)) Vᵀ`.
pub fn spectral_map<T: Real>(vals: &DVector<T>, vecs: &DMatrix<T>, f: impl Fn(T) -> T) -> DMatrix<T> {
    let n = vals.len();
    let mut scaled = vecs.clone();
    for j in 0..n {
        let fj = f(vals[j]);
        scaled.column_mut(j).scale_mut(fj);
    }
    &scaled * vecs.transpose()
}

/// Zeroes the strict upper triangle.
pub fn lower_triangle<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            out[(i, j)] = T::zero();
        }
    }
    out
}

pub fn inf_norm<T: Real>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

pub(crate) fn ensure_finite_vec<T: Real>(v: &DVector<T>, ctx: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite_val()) {
        Ok(())
    } else {
        Err(Error::NonFinite(ctx))
    }
}

pub(crate) fn ensure_finite_mat<T: Real>(m: &DMatrix<T>, ctx: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite_val()) {
        Ok(())
    } else {
        Err(Error::NonFinite(ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn qr_solves_square_system_and_transpose() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 2.0, 0.5, 3.0, -1.0, 1.0, 2.0, 5.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let qr = PivotedQr::new(a.clone());
        let x = qr.solve(&b);
        assert_relative_eq!(&a * &x, b, epsilon = 1e-12);
        let g = qr.solve_transpose(&b);
        assert_relative_eq!(a.transpose() * &g, b, epsilon = 1e-12);
    }

    #[test]
    fn qr_pivots_are_nonincreasing_and_detect_rank() {
        // Third column duplicates the first.
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 1.0, 3.0, -1.0, 3.0, 0.0, 4.0, 0.0]);
        let qr = PivotedQr::new(a);
        assert_eq!(qr.rank(1e-12), 2);
        assert!(qr.condition_estimate() > 1e12);
    }

    #[test]
    fn qr_least_squares_overdetermined() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 2.9, 4.1]);
        let x = PivotedQr::new(a.clone()).solve(&b);
        // normal equations oracle
        let xn = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * &b;
        assert_relative_eq!(x, xn, epsilon = 1e-12);
    }

    #[test]
    fn ridge_matches_normal_equations() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 3.0]);
        let x = ridge_lstsq(&a, &b, 0.5);
        let xn = (a.transpose() * &a + DMatrix::identity(2, 2) * 0.5)
            .try_inverse()
            .unwrap()
            * a.transpose()
            * &b;
        assert_relative_eq!(x, xn, epsilon = 1e-12);
    }
}
