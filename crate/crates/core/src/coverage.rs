//! Bootstrap replicas of the reference distribution, radius calibration and
//! the smoothed coverage penalty
//! `e(θ) = (1/n_b) Σ σ(d(P̂, P̂_k; θ)/ε − 1) − β` with its gradient in `L`.
//!
//! Replica `k` draws its row indices from a ChaCha8 generator seeded with the
//! run seed and switched to stream `k`, so replicas are independent of each
//! other and of how many are requested.

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dro_problems::DatasetView;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::transport_metrics::{
    discrete_distance, discrete_distance_gradient, discrete_point, discrete_point_gradient, gelbrich_distance,
    gelbrich_gradient, matrix_from_rows, DiscreteDistribution, DiscretePoint, DistributionFile, GaussianMoments,
    GelbrichPair, GelbrichPoint, TransportParam, GELBRICH_GRAD_RIDGE,
};

/// Ridge added to empirical covariances.
pub const COV_RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootstrapMode {
    Discrete,
    Gaussian,
}

/// A reference distribution in either representation.
#[derive(Clone, Debug, PartialEq)]
pub enum Reference<T: Real> {
    Discrete(DiscreteDistribution<T>),
    Gaussian(GaussianMoments<T>),
}

impl Reference<f64> {
    /// Reads the JSON form (atoms with weights, or mean and covariance).
    pub fn from_file(file: &DistributionFile) -> Result<Reference<f64>> {
        Ok(match file {
            DistributionFile::Discrete { points, weights } => Reference::Discrete(DiscreteDistribution::new(
                matrix_from_rows(points, "atom coordinates")?,
                DVector::from_vec(weights.clone()),
            )?),
            DistributionFile::Gaussian { mean, cov } => Reference::Gaussian(GaussianMoments::new(
                DVector::from_vec(mean.clone()),
                matrix_from_rows(cov, "covariance rows")?,
            )?),
        })
    }
}

impl<T: Real> Reference<T> {
    /// Empirical distribution of the dataset (uniform atoms, or mean and
    /// `1/J` covariance plus the ridge).
    pub fn empirical(data: &DatasetView<T>, mode: BootstrapMode) -> Result<Self> {
        from_rows(data, &(0..data.len()).collect::<Vec<_>>(), mode)
    }

    pub fn mode(&self) -> BootstrapMode {
        match self {
            Reference::Discrete(_) => BootstrapMode::Discrete,
            Reference::Gaussian(_) => BootstrapMode::Gaussian,
        }
    }

    /// Distance under the mode's transport metric.
    pub fn distance(&self, other: &Self, param: &TransportParam<T>) -> Result<T> {
        match (self, other) {
            (Reference::Discrete(a), Reference::Discrete(b)) => discrete_distance(a, b, param),
            (Reference::Gaussian(a), Reference::Gaussian(b)) => gelbrich_distance(a, b, param),
            _ => Err(mode_mismatch()),
        }
    }

    pub fn distance_gradient(&self, other: &Self, param: &TransportParam<T>) -> Result<DMatrix<T>> {
        match (self, other) {
            (Reference::Discrete(a), Reference::Discrete(b)) => discrete_distance_gradient(a, b, param),
            (Reference::Gaussian(a), Reference::Gaussian(b)) => gelbrich_gradient(a, b, param),
            _ => Err(mode_mismatch()),
        }
    }
}

fn mode_mismatch() -> Error {
    Error::InvalidInput("base and replica distributions have different modes".into())
}

/// Empirical distribution of the selected rows. Repeated rows are merged
/// into one atom with summed weight, which keeps transport problems small.
fn from_rows<T: Real>(data: &DatasetView<T>, rows: &[usize], mode: BootstrapMode) -> Result<Reference<T>> {
    let s = data.samples();
    let d = data.dim();
    let n = T::from_count(rows.len());
    match mode {
        BootstrapMode::Discrete => {
            let mut counts = vec![0usize; data.len()];
            for &r in rows {
                counts[r] += 1;
            }
            let kept: Vec<usize> = (0..data.len()).filter(|&r| counts[r] > 0).collect();
            let points = DMatrix::from_fn(kept.len(), d, |i, j| s[(kept[i], j)]);
            let weights = DVector::from_iterator(kept.len(), kept.iter().map(|&r| T::from_count(counts[r]) / n));
            let weights = &weights / weights.sum();
            Ok(Reference::Discrete(DiscreteDistribution::new(points, weights)?))
        }
        BootstrapMode::Gaussian => {
            let mut mean = DVector::zeros(d);
            for &r in rows {
                mean += s.row(r).transpose();
            }
            mean /= n;
            let mut cov = DMatrix::identity(d, d) * T::lit(COV_RIDGE);
            for &r in rows {
                let c = s.row(r).transpose() - &mean;
                cov += &c * c.transpose() / n;
            }
            Ok(Reference::Gaussian(GaussianMoments::new(mean, cov)?))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapSet<T: Real> {
    pub mode: BootstrapMode,
    pub replicas: Vec<Reference<T>>,
    pub seed: u64,
}

impl<T: Real> BootstrapSet<T> {
    pub fn len(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }
}

/// Row indices of replica `k`.
pub fn replica_rows(n_rows: usize, seed: u64, k: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    (0..n_rows).map(|_| rng.random_range(0..n_rows)).collect()
}

pub fn bootstrap<T: Real>(data: &DatasetView<T>, n_b: usize, mode: BootstrapMode, seed: u64) -> Result<BootstrapSet<T>> {
    if n_b == 0 {
        return Err(Error::InvalidInput("need at least one bootstrap replica".into()));
    }
    let replicas = (0..n_b)
        .map(|k| from_rows(data, &replica_rows(data.len(), seed, k), mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(BootstrapSet { mode, replicas, seed })
}

/// The `⌈(1−β) n_b⌉`-th smallest distance.
pub fn calibrate_epsilon<T: Real>(distances: &[T], beta: f64) -> Result<T> {
    if distances.is_empty() {
        return Err(Error::InvalidInput("no distances to calibrate from".into()));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidInput(format!("beta {beta} outside [0, 1)")));
    }
    if distances.iter().any(|d| !d.is_finite_val()) {
        return Err(Error::NonFinite("bootstrap distances"));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    // The small slack keeps exact products such as 0.9 · 20 from rounding up.
    let rank = (((1.0 - beta) * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}

/// `1 / (1 + exp(−η x))`, evaluated without overflow.
pub fn sigmoid<T: Real>(x: T, eta: T) -> T {
    let z = eta * x;
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub beta: f64,
    pub lambda_p: f64,
    pub eta_p: f64,
    pub eps: f64,
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0
            && self.beta < 1.0
            && self.lambda_p >= 0.0
            && self.eta_p > 0.0
            && self.eps > 0.0
            && [self.lambda_p, self.eta_p, self.eps].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid penalty configuration {self:?}")))
        }
    }
}

/// Distances from the base to every replica.
pub fn replica_distances<T: Real>(
    param: &TransportParam<T>,
    base: &Reference<T>,
    boots: &BootstrapSet<T>,
) -> Result<Vec<T>> {
    boots.replicas.iter().map(|r| base.distance(r, param)).collect()
}

/// `e(θ)` together with `J_e`, sharing the distance evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyState<T: Real> {
    pub e: T,
    pub jacobian: DMatrix<T>,
    pub distances: Vec<T>,
}

fn e_from_distances<T: Real>(distances: &[T], cfg: &PenaltyConfig) -> T {
    let eps = T::lit(cfg.eps);
    let eta = T::lit(cfg.eta_p);
    let n = T::from_count(distances.len());
    let mean = distances.iter().fold(T::zero(), |acc, &d| acc + sigmoid(d / eps - T::one(), eta)) / n;
    mean - T::lit(cfg.beta)
}

pub fn penalty_value<T: Real>(
    param: &TransportParam<T>,
    base: &Reference<T>,
    boots: &BootstrapSet<T>,
    cfg: &PenaltyConfig,
) -> Result<T> {
    cfg.validate()?;
    Ok(e_from_distances(&replica_distances(param, base, boots)?, cfg))
}

/// `J_e = (1/(n_b ε)) Σ σ′(d_k/ε − 1) ∇_L d_k`, lower triangle.
pub fn penalty_gradient<T: Real>(
    param: &TransportParam<T>,
    base: &Reference<T>,
    boots: &BootstrapSet<T>,
    cfg: &PenaltyConfig,
) -> Result<DMatrix<T>> {
    Ok(penalty_state(param, base, boots, cfg)?.jacobian)
}

pub fn penalty_state<T: Real>(
    param: &TransportParam<T>,
    base: &Reference<T>,
    boots: &BootstrapSet<T>,
    cfg: &PenaltyConfig,
) -> Result<PenaltyState<T>> {
    state_impl(param, base, boots, &gelbrich_pairs(base, boots)?, None, cfg, false)
}

fn gelbrich_pairs<T: Real>(base: &Reference<T>, boots: &BootstrapSet<T>) -> Result<Vec<GelbrichPair<T>>> {
    match base {
        Reference::Gaussian(b) => boots
            .replicas
            .iter()
            .map(|r| match r {
                Reference::Gaussian(q) => GelbrichPair::new(b, q, T::lit(GELBRICH_GRAD_RIDGE)),
                Reference::Discrete(_) => Err(mode_mismatch()),
            })
            .collect(),
        Reference::Discrete(_) => Ok(Vec::new()),
    }
}

/// Last optimal basis per replica, used to warm-start the transport simplex.
#[derive(Debug, Default)]
struct BasisCache(Vec<Mutex<Vec<(usize, usize)>>>);

impl BasisCache {
    fn new(n: usize) -> Self {
        BasisCache((0..n).map(|_| Mutex::new(Vec::new())).collect())
    }

    fn get(&self, k: usize) -> Vec<(usize, usize)> {
        self.0[k].lock().map(|b| b.clone()).unwrap_or_default()
    }

    fn set(&self, k: usize, basis: &[(usize, usize)]) {
        if let Ok(mut b) = self.0[k].lock() {
            b.clear();
            b.extend_from_slice(basis);
        }
    }
}

impl Clone for BasisCache {
    fn clone(&self) -> Self {
        BasisCache((0..self.0.len()).map(|k| Mutex::new(self.get(k))).collect())
    }
}

enum Point<T: Real> {
    Gelbrich(GelbrichPoint<T>),
    Discrete(DiscretePoint<T>),
}

fn replica_points<T: Real>(
    param: &TransportParam<T>,
    base: &Reference<T>,
    boots: &BootstrapSet<T>,
    pairs: &[GelbrichPair<T>],
    cache: Option<&BasisCache>,
) -> Result<Vec<Point<T>>> {
    if !pairs.is_empty() {
        return pairs.iter().map(|p| p.point(param).map(Point::Gelbrich)).collect();
    }
    let Reference::Discrete(b) = base else {
        return Err(mode_mismatch());
    };
    boots
        .replicas
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let Reference::Discrete(q) = r else {
                return Err(mode_mismatch());
            };
            let warm = cache.map(|c| c.get(k));
            let pt = discrete_point(b, q, param, warm.as_deref().filter(|w| !w.is_empty()))?;
            if let Some(c) = cache {
                c.set(k, &pt.basis);
            }
            Ok(Point::Discrete(pt))
        })
        .collect()
}

fn state_impl<T: Real>(
    param: &TransportParam<T>,
    base: &Reference<T>,
    boots: &BootstrapSet<T>,
    pairs: &[GelbrichPair<T>],
    cache: Option<&BasisCache>,
    cfg: &PenaltyConfig,
    lazy: bool,
) -> Result<PenaltyState<T>> {
    cfg.validate()?;
    let d = param.dim();
    let eps = T::lit(cfg.eps);
    let eta = T::lit(cfg.eta_p);
    let points = replica_points(param, base, boots, pairs, cache)?;
    let distances: Vec<T> = points
        .iter()
        .map(|p| match p {
            Point::Gelbrich(g) => g.distance,
            Point::Discrete(q) => q.distance,
        })
        .collect();
    let e = e_from_distances(&distances, cfg);
    let mut jacobian = DMatrix::zeros(d, d);
    if lazy && (cfg.lambda_p == 0.0 || e <= T::zero()) {
        return Ok(PenaltyState { e, jacobian, distances });
    }
    for (k, (r, pt)) in boots.replicas.iter().zip(&points).enumerate() {
        let s = sigmoid(distances[k] / eps - T::one(), eta);
        let slope = eta * s * (T::one() - s);
        if slope > T::zero() {
            let grad = match (pt, base, r) {
                (Point::Gelbrich(g), _, _) => pairs[k].gradient(g, param)?,
                (Point::Discrete(q), Reference::Discrete(a), Reference::Discrete(b)) => {
                    discrete_point_gradient(q, a, b, param)?
                }
                _ => return Err(mode_mismatch()),
            };
            jacobian += grad * slope;
        }
    }
    jacobian /= T::from_count(boots.len()) * eps;
    Ok(PenaltyState { e, jacobian, distances })
}

/// Base, replicas, the `L`-independent Gelbrich factors and the last
/// transport bases, for repeated penalty evaluations along a training run.
#[derive(Clone, Debug)]
pub struct CoverageModel<T: Real> {
    pub base: Reference<T>,
    pub boots: BootstrapSet<T>,
    pairs: Vec<GelbrichPair<T>>,
    bases: BasisCache,
}

impl<T: Real> CoverageModel<T> {
    pub fn new(base: Reference<T>, boots: BootstrapSet<T>) -> Result<Self> {
        let pairs = gelbrich_pairs(&base, &boots)?;
        let bases = BasisCache::new(boots.len());
        Ok(CoverageModel {
            base,
            boots,
            pairs,
            bases,
        })
    }

    pub fn distances(&self, param: &TransportParam<T>) -> Result<Vec<T>> {
        replica_distances(param, &self.base, &self.boots)
    }

    pub fn state(&self, param: &TransportParam<T>, cfg: &PenaltyConfig) -> Result<PenaltyState<T>> {
        state_impl(param, &self.base, &self.boots, &self.pairs, Some(&self.bases), cfg, false)
    }

    /// As [`Self::state`], but leaves `jacobian` at zero when the penalty
    /// gradient `2λ_p max{0, e} J_e` vanishes anyway.
    pub fn gated_state(&self, param: &TransportParam<T>, cfg: &PenaltyConfig) -> Result<PenaltyState<T>> {
        state_impl(param, &self.base, &self.boots, &self.pairs, Some(&self.bases), cfg, true)
    }
}
