//! Exact solver for the balanced transportation problem
//! `min Σ C_ij π_ij  s.t.  π 1 = a, πᵀ 1 = b, π ≥ 0`.
//!
//! Transportation simplex (MODI) on a spanning-tree basis. Starts from the
//! northwest-corner rule, prices with Dantzig's rule and switches to Bland's
//! rule after a run of degenerate pivots.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct TransportSolution<T: Real> {
    pub plan: DMatrix<T>,
    pub value: T,
    /// Dual potentials with `u_i + v_j ≤ C_ij`, tight on the basis.
    pub u: DVector<T>,
    pub v: DVector<T>,
    pub pivots: usize,
    /// Final spanning-tree basis, reusable as a warm start when only the
    /// costs change.
    pub basis: Vec<(usize, usize)>,
}

const DEGENERATE_RUN: usize = 50;

struct Basis {
    cells: Vec<(usize, usize)>,
}

impl Basis {
    /// Tree nodes: rows are `0..ns`, columns are `ns..ns+nd`.
    fn adjacency(&self, ns: usize, nd: usize) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); ns + nd];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((ns + j, k));
            adj[ns + j].push((i, k));
        }
        adj
    }
}

fn potentials<T: Real>(
    cost: &DMatrix<T>,
    adj: &[Vec<(usize, usize)>],
    ns: usize,
    basis: &Basis,
) -> (DVector<T>, DVector<T>) {
    let nd = cost.ncols();
    let mut u = DVector::zeros(ns);
    let mut v = DVector::zeros(nd);
    let mut seen = vec![false; ns + nd];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(node) = stack.pop() {
        for &(next, k) in &adj[node] {
            if seen[next] {
                continue;
            }
            seen[next] = true;
            let (i, j) = basis.cells[k];
            if next >= ns {
                v[j] = cost[(i, j)] - u[i];
            } else {
                u[i] = cost[(i, j)] - v[j];
            }
            stack.push(next);
        }
    }
    (u, v)
}

/// Basis-cell indices on the tree path from `from` to `to`, in order.
fn tree_path(adj: &[Vec<(usize, usize)>], from: usize, to: usize) -> Vec<usize> {
    let n = adj.len();
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    seen[from] = true;
    queue.push_back(from);
    while let Some(node) = queue.pop_front() {
        if node == to {
            break;
        }
        for &(next, k) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, k));
                queue.push_back(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = to;
    while node != from {
        let (prev, k) = parent[node].expect("basis is a spanning tree");
        path.push(k);
        node = prev;
    }
    path.reverse();
    path
}

pub fn solve_transport<T: Real>(cost: &DMatrix<T>, a: &DVector<T>, b: &DVector<T>) -> Result<TransportSolution<T>> {
    solve_transport_from(cost, a, b, None)
}

/// Northwest-corner start.
fn northwest<T: Real>(a: &DVector<T>, b: &DVector<T>) -> (DMatrix<T>, Vec<(usize, usize)>) {
    let (ns, nd) = (a.len(), b.len());
    let mut plan = DMatrix::zeros(ns, nd);
    let mut ra = a.clone();
    let mut rb = b.clone();
    let mut cells = Vec::with_capacity(ns + nd - 1);
    let (mut i, mut j) = (0, 0);
    loop {
        let q = ra[i].min(rb[j]).max(T::zero());
        plan[(i, j)] = q;
        ra[i] -= q;
        rb[j] -= q;
        cells.push((i, j));
        if i == ns - 1 && j == nd - 1 {
            break;
        }
        if j == nd - 1 || (i < ns - 1 && ra[i] <= rb[j]) {
            i += 1;
        } else {
            j += 1;
        }
    }
    (plan, cells)
}

/// Flows of a given basis, by peeling leaves of the spanning tree. `None`
/// when the cells do not form a spanning tree or a flow is negative.
fn basis_flows<T: Real>(a: &DVector<T>, b: &DVector<T>, cells: &[(usize, usize)]) -> Option<DMatrix<T>> {
    let (ns, nd) = (a.len(), b.len());
    if cells.len() != ns + nd - 1 || cells.iter().any(|&(i, j)| i >= ns || j >= nd) {
        return None;
    }
    let mut rest: Vec<T> = a.iter().chain(b.iter()).copied().collect();
    let mut degree = vec![0usize; ns + nd];
    let mut adj = vec![Vec::new(); ns + nd];
    for (k, &(i, j)) in cells.iter().enumerate() {
        degree[i] += 1;
        degree[ns + j] += 1;
        adj[i].push(k);
        adj[ns + j].push(k);
    }
    let mut used = vec![false; cells.len()];
    let mut leaves: Vec<usize> = (0..ns + nd).filter(|&n| degree[n] == 1).collect();
    let mut plan = DMatrix::zeros(ns, nd);
    let mut assigned = 0;
    let slack = T::lit(1e-12);
    while let Some(node) = leaves.pop() {
        if degree[node] != 1 {
            continue;
        }
        let k = *adj[node].iter().find(|&&k| !used[k])?;
        used[k] = true;
        assigned += 1;
        let (i, j) = cells[k];
        let other = if node < ns { ns + j } else { i };
        let flow = rest[node];
        if flow < -slack {
            return None;
        }
        let flow = flow.max(T::zero());
        plan[(i, j)] = flow;
        rest[other] -= flow;
        degree[node] = 0;
        degree[other] -= 1;
        if degree[other] == 1 {
            leaves.push(other);
        }
    }
    (assigned == cells.len()).then_some(plan)
}

/// As [`solve_transport`], starting from `warm` when it is a feasible basis
/// for these marginals.
pub fn solve_transport_from<T: Real>(
    cost: &DMatrix<T>,
    a: &DVector<T>,
    b: &DVector<T>,
    warm: Option<&[(usize, usize)]>,
) -> Result<TransportSolution<T>> {
    let (ns, nd) = cost.shape();
    check_len("transport supplies", ns, a.len())?;
    check_len("transport demands", nd, b.len())?;
    if ns == 0 || nd == 0 {
        return Err(Error::InvalidInput("empty transport problem".into()));
    }
    if cost.iter().chain(a.iter()).chain(b.iter()).any(|v| !v.is_finite_val()) {
        return Err(Error::NonFinite("transport data"));
    }

    let (mut plan, cells) = match warm.and_then(|w| basis_flows(a, b, w).map(|p| (p, w.to_vec()))) {
        Some(start) => start,
        None => northwest(a, b),
    };
    let mut basis = Basis { cells };
    let mut in_basis = DMatrix::from_element(ns, nd, false);
    for &(i, j) in &basis.cells {
        in_basis[(i, j)] = true;
    }

    let scale = cost.amax().max(T::one());
    let tol = T::lit(1e-12) * scale;
    let max_pivots = 50 * ns * nd + 1000;
    let mut degenerate_run = 0usize;
    let mut pivots = 0usize;

    loop {
        let adj = basis.adjacency(ns, nd);
        let (u, v) = potentials(cost, &adj, ns, &basis);
        let bland = degenerate_run >= DEGENERATE_RUN;
        let mut enter: Option<(usize, usize)> = None;
        let mut best = -tol;
        'scan: for i in 0..ns {
            for j in 0..nd {
                if in_basis[(i, j)] {
                    continue;
                }
                let r = cost[(i, j)] - u[i] - v[j];
                if r < best {
                    enter = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = r;
                }
            }
        }
        let Some((ei, ej)) = enter else {
            let value = plan.component_mul(cost).sum();
            return Ok(TransportSolution {
                plan,
                value,
                u,
                v,
                pivots,
                basis: basis.cells,
            });
        };
        if pivots >= max_pivots {
            return Err(Error::TransportStalled(pivots));
        }
        pivots += 1;

        // Cycle: entering cell (+), then alternate along the tree path from
        // column ej back to row ei; the first path cell touches column ej (−).
        let path = tree_path(&adj, ns + ej, ei);
        let mut theta = T::max_value().unwrap_or_else(|| T::lit(f64::MAX));
        let mut leave_pos = usize::MAX;
        for (pos, &k) in path.iter().enumerate().step_by(2) {
            let (ci, cj) = basis.cells[k];
            let x = plan[(ci, cj)];
            let better = x < theta
                || (x == theta && leave_pos != usize::MAX && bland && basis.cells[k] < basis.cells[path[leave_pos]]);
            if better {
                theta = x;
                leave_pos = pos;
            }
        }
        if theta <= T::zero() {
            degenerate_run += 1;
        } else {
            degenerate_run = 0;
        }
        for (pos, &k) in path.iter().enumerate() {
            let (ci, cj) = basis.cells[k];
            if pos % 2 == 0 {
                plan[(ci, cj)] = (plan[(ci, cj)] - theta).max(T::zero());
            } else {
                plan[(ci, cj)] += theta;
            }
        }
        plan[(ei, ej)] = theta;
        let leave_k = path[leave_pos];
        let (li, lj) = basis.cells[leave_k];
        plan[(li, lj)] = T::zero();
        in_basis[(li, lj)] = false;
        in_basis[(ei, ej)] = true;
        basis.cells[leave_k] = (ei, ej);
    }
}
