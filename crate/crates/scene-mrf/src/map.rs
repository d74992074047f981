//! MAP inference over Scene-MRFs, plus exhaustive-enumeration oracles.
//!
//! Four solvers with different contracts:
//!
//! - [`brute_force_map`] / [`brute_force_marginals`]: exact enumeration with
//!   a state-space guard.  These exist as independent ground truth for the
//!   other routines and stay deliberately naive.
//! - [`tree_map`]: min-sum (max-product) dynamic programming with
//!   backtracking; exact on trees.
//! - [`mplp_map`]: edge-based block-coordinate ascent on the dual of the
//!   pairwise LP relaxation.  The dual value never decreases, always
//!   lower-bounds the optimal energy, and is tight on trees.
//! - [`constrained_refine_mcmc`]: simulated annealing over single-variable
//!   moves restricted to all-distinct assignments, for the "one box per
//!   node" reading of a query.
//!
//! Ties anywhere resolve to the lowest box index (and lowest node order),
//! so every routine is deterministic.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::bp::BpResult;
use crate::graph::{energy_of_assignment, Assignment, GraphError, SceneMrf};

/// Enumeration refuses state spaces larger than this.
pub const ENUMERATION_GUARD: u128 = 10_000_000;

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error(
        "state space of {states} assignments exceeds the enumeration guard of {ENUMERATION_GUARD}"
    )]
    GuardExceeded { states: u128 },
    #[error("no all-distinct assignment exists: {n_vars} variables but {n_boxes} boxes")]
    Infeasible { n_vars: usize, n_boxes: usize },
    #[error("routine requires a tree-structured MRF")]
    NotATree,
    #[error("MRF has no variables")]
    Empty,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

type Result<T> = std::result::Result<T, MapError>;

/// A MAP solution: the assignment, its exact energy, an optional dual lower
/// bound on the optimal energy, and whether the assignment is all-distinct.
#[derive(Debug, Clone)]
pub struct MapResult {
    pub assignment: Assignment,
    pub energy: f64,
    pub dual_bound: Option<f64>,
    pub distinct: bool,
}

fn check_nonempty(m: &SceneMrf) -> Result<()> {
    if m.n_vars == 0 {
        return Err(MapError::Empty);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Enumeration oracles
// ---------------------------------------------------------------------------

/// Visit every assignment in lexicographic order.
fn for_each_assignment(n_vars: usize, n_boxes: usize, mut f: impl FnMut(&[usize])) {
    let mut a = vec![0usize; n_vars];
    loop {
        f(&a);
        // Odometer increment, last variable fastest.
        let mut d = n_vars;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            a[d] += 1;
            if a[d] < n_boxes {
                break;
            }
            a[d] = 0;
        }
    }
}

fn all_distinct(a: &[usize]) -> bool {
    // Assignments are tiny; quadratic scan beats allocating a set.
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            if a[i] == a[j] {
                return false;
            }
        }
    }
    true
}

fn guard(m: &SceneMrf) -> Result<()> {
    let states = m.state_space();
    if states > ENUMERATION_GUARD {
        return Err(MapError::GuardExceeded { states });
    }
    Ok(())
}

/// Exact MAP by enumeration.  With `distinct` set, only all-distinct
/// assignments compete.  Ties go to the lexicographically smallest
/// assignment.
pub fn brute_force_map(m: &SceneMrf, distinct: bool) -> Result<MapResult> {
    check_nonempty(m)?;
    guard(m)?;
    if distinct && m.n_vars > m.n_boxes {
        return Err(MapError::Infeasible {
            n_vars: m.n_vars,
            n_boxes: m.n_boxes,
        });
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut scratch = Assignment { boxes: vec![] };
    for_each_assignment(m.n_vars, m.n_boxes, |a| {
        if distinct && !all_distinct(a) {
            return;
        }
        scratch.boxes.clear();
        scratch.boxes.extend_from_slice(a);
        let e = energy_of_assignment(m, &scratch).expect("enumerated assignment in range");
        let better = match &best {
            None => true,
            Some((be, _)) => e < *be,
        };
        if better {
            best = Some((e, a.to_vec()));
        }
    });
    let (energy, boxes) = best.expect("non-empty state space");
    let assignment = Assignment { boxes };
    let distinct_out = assignment.is_distinct();
    Ok(MapResult {
        assignment,
        energy,
        dual_bound: None,
        distinct: distinct_out,
    })
}

/// Streaming log-sum-exp accumulator.
#[derive(Clone, Copy)]
struct LseAcc {
    max: f64,
    sum: f64,
}

impl LseAcc {
    fn new() -> Self {
        LseAcc {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    fn push(&mut self, x: f64) {
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// Exact marginals and log partition function by enumeration.
pub fn brute_force_marginals(m: &SceneMrf) -> Result<BpResult> {
    check_nonempty(m)?;
    guard(m)?;
    let nb = m.n_boxes;
    let mut log_z = LseAcc::new();
    let mut buckets = vec![LseAcc::new(); m.n_vars * nb];
    let mut scratch = Assignment { boxes: vec![] };
    for_each_assignment(m.n_vars, nb, |a| {
        scratch.boxes.clear();
        scratch.boxes.extend_from_slice(a);
        let w = -energy_of_assignment(m, &scratch).expect("enumerated assignment in range");
        log_z.push(w);
        for (v, &b) in a.iter().enumerate() {
            buckets[v * nb + b].push(w);
        }
    });
    let z = log_z.value();
    let marginals = (0..m.n_vars)
        .map(|v| {
            let p: Vec<f64> = (0..nb)
                .map(|b| (buckets[v * nb + b].value() - z).exp())
                .collect();
            Tensor::from_vec(&[nb], p).expect("marginal shape")
        })
        .collect();
    Ok(BpResult {
        marginals,
        log_partition: Tensor::scalar(z),
        converged: true,
        iterations: 1,
    })
}

/// Exact pairwise marginal `P(a_j = b, a_k = b')` by enumeration, as a
/// row-major `n_boxes x n_boxes` table.
pub fn brute_force_pair_marginal(m: &SceneMrf, j: usize, k: usize) -> Result<Vec<f64>> {
    check_nonempty(m)?;
    guard(m)?;
    assert!(j < m.n_vars && k < m.n_vars && j != k);
    let nb = m.n_boxes;
    let mut log_z = LseAcc::new();
    let mut buckets = vec![LseAcc::new(); nb * nb];
    let mut scratch = Assignment { boxes: vec![] };
    for_each_assignment(m.n_vars, nb, |a| {
        scratch.boxes.clear();
        scratch.boxes.extend_from_slice(a);
        let w = -energy_of_assignment(m, &scratch).expect("enumerated assignment in range");
        log_z.push(w);
        buckets[a[j] * nb + a[k]].push(w);
    });
    let z = log_z.value();
    Ok(buckets.iter().map(|acc| (acc.value() - z).exp()).collect())
}

// ---------------------------------------------------------------------------
// Tree min-sum with backtracking
// ---------------------------------------------------------------------------

/// Exact MAP on a tree-structured MRF by min-sum dynamic programming.
pub fn tree_map(m: &SceneMrf) -> Result<MapResult> {
    check_nonempty(m)?;
    if !m.is_tree() {
        return Err(MapError::NotATree);
    }
    let nb = m.n_boxes;
    let n = m.n_vars;

    // Variable adjacency carrying the factor index.
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n]; // (neighbor, factor idx)
    for (idx, p) in m.pairwise.iter().enumerate() {
        adj[p.j].push((p.k, idx));
        adj[p.k].push((p.j, idx));
    }

    // BFS order from the root so children precede parents when reversed.
    let root = 0usize;
    let mut order = vec![root];
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n]; // (parent var, factor idx)
    let mut head = 0;
    while head < order.len() {
        let v = order[head];
        head += 1;
        for &(w, fidx) in &adj[v] {
            if Some(w) != parent[v].map(|(p, _)| p) && w != root && parent[w].is_none() {
                parent[w] = Some((v, fidx));
                order.push(w);
            }
        }
    }

    let unary_cost =
        |v: usize, b: usize| -> f64 { m.unary[v].as_ref().map_or(0.0, |u| u.data()[b]) };

    // cost[v][x] = best energy of v's subtree given v takes x
    let mut cost = vec![vec![0.0f64; nb]; n];
    for (v, row) in cost.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            *cell = unary_cost(v, b);
        }
    }
    // choice[v][x_parent] = argmin x_v when v's parent takes x_parent
    let mut choice = vec![vec![0usize; nb]; n];

    for &v in order.iter().rev() {
        let Some((p, fidx)) = parent[v] else { continue };
        let factor = &m.pairwise[fidx];
        let table = factor.table.data();
        let mut msg = vec![0.0f64; nb];
        for bp_ in 0..nb {
            let mut best_e = f64::INFINITY;
            let mut best_b = 0usize;
            for bv in 0..nb {
                // Orient the table: axis 0 is factor.j, axis 1 is factor.k.
                let edge = if factor.j == v {
                    table[bv * nb + bp_]
                } else {
                    table[bp_ * nb + bv]
                };
                let e = edge + cost[v][bv];
                if e < best_e {
                    best_e = e;
                    best_b = bv;
                }
            }
            msg[bp_] = best_e;
            choice[v][bp_] = best_b;
        }
        for bp_ in 0..nb {
            cost[p][bp_] += msg[bp_];
        }
    }

    let mut boxes = vec![0usize; n];
    let mut best_e = f64::INFINITY;
    for (b, &c) in cost[root].iter().enumerate() {
        if c < best_e {
            best_e = c;
            boxes[root] = b;
        }
    }
    for &v in &order {
        if let Some((p, _)) = parent[v] {
            boxes[v] = choice[v][boxes[p]];
        }
    }
    let assignment = Assignment { boxes };
    let energy = energy_of_assignment(m, &assignment)?;
    debug_assert!((energy - best_e).abs() < 1e-9, "backtracked energy drifted");
    let distinct = assignment.is_distinct();
    Ok(MapResult {
        assignment,
        energy,
        dual_bound: Some(energy),
        distinct,
    })
}

// ---------------------------------------------------------------------------
// MPLP
// ---------------------------------------------------------------------------

/// Settings for [`mplp_map`].
#[derive(Debug, Clone, Copy)]
pub struct MplpOptions {
    pub max_iters: usize,
    /// Stop when one full pass improves the dual by less than this.
    pub tol: f64,
}

impl Default for MplpOptions {
    fn default() -> Self {
        MplpOptions {
            max_iters: 200,
            tol: 1e-7,
        }
    }
}

/// MAP by message passing on the LP dual (MPLP).
///
/// Each edge update is the exact block-coordinate maximizer of the dual, so
/// the reported `dual_bound` increases monotonically and always lower-bounds
/// the optimal energy; the primal assignment is decoded from node beliefs
/// after every pass and the best one seen is returned.  Exact on trees.
pub fn mplp_map(m: &SceneMrf, opts: MplpOptions) -> Result<MapResult> {
    check_nonempty(m)?;
    let nb = m.n_boxes;
    let n = m.n_vars;

    let theta: Vec<Vec<f64>> = (0..n)
        .map(|v| {
            m.unary[v]
                .as_ref()
                .map_or_else(|| vec![0.0; nb], |u| u.data().to_vec())
        })
        .collect();

    // Per edge: reparameterization messages into each endpoint.
    let mut lam: Vec<[Vec<f64>; 2]> = m
        .pairwise
        .iter()
        .map(|_| [vec![0.0; nb], vec![0.0; nb]])
        .collect();
    // Node beliefs, maintained incrementally: b[v] = theta[v] + sum lam.
    let mut belief = theta.clone();

    let decode = |belief: &[Vec<f64>]| -> Assignment {
        Assignment {
            boxes: belief
                .iter()
                .map(|b| {
                    let mut best = 0usize;
                    for x in 1..nb {
                        if b[x] < b[best] {
                            best = x;
                        }
                    }
                    best
                })
                .collect(),
        }
    };

    let dual_value = |belief: &[Vec<f64>], lam: &[[Vec<f64>; 2]]| -> f64 {
        let mut total = 0.0;
        for b in belief {
            total += b.iter().cloned().fold(f64::INFINITY, f64::min);
        }
        for (idx, p) in m.pairwise.iter().enumerate() {
            let table = p.table.data();
            let mut best = f64::INFINITY;
            for xj in 0..nb {
                for xk in 0..nb {
                    let slack = table[xj * nb + xk] - lam[idx][0][xj] - lam[idx][1][xk];
                    if slack < best {
                        best = slack;
                    }
                }
            }
            total += best;
        }
        total
    };

    let mut best: Option<(f64, Assignment)> = None;
    let consider = |belief: &[Vec<f64>], best: &mut Option<(f64, Assignment)>| {
        let a = decode(belief);
        let e = energy_of_assignment(m, &a).expect("decoded assignment in range");
        if best.as_ref().is_none_or(|(be, _)| e < *be) {
            *best = Some((e, a));
        }
    };

    consider(&belief, &mut best);
    let mut dual = dual_value(&belief, &lam);
    for _ in 0..opts.max_iters {
        for (idx, p) in m.pairwise.iter().enumerate() {
            let table = p.table.data();
            // Beliefs with this edge's contribution removed.
            let a_j: Vec<f64> = (0..nb).map(|x| belief[p.j][x] - lam[idx][0][x]).collect();
            let a_k: Vec<f64> = (0..nb).map(|x| belief[p.k][x] - lam[idx][1][x]).collect();
            for xj in 0..nb {
                let mut best_k = f64::INFINITY;
                for xk in 0..nb {
                    let v = table[xj * nb + xk] + a_k[xk];
                    if v < best_k {
                        best_k = v;
                    }
                }
                lam[idx][0][xj] = 0.5 * (best_k - a_j[xj]);
                belief[p.j][xj] = a_j[xj] + lam[idx][0][xj];
            }
            for xk in 0..nb {
                let mut best_j = f64::INFINITY;
                for xj in 0..nb {
                    let v = table[xj * nb + xk] + a_j[xj];
                    if v < best_j {
                        best_j = v;
                    }
                }
                lam[idx][1][xk] = 0.5 * (best_j - a_k[xk]);
                belief[p.k][xk] = a_k[xk] + lam[idx][1][xk];
            }
        }
        consider(&belief, &mut best);
        let new_dual = dual_value(&belief, &lam);
        let improved = new_dual - dual;
        dual = new_dual;
        if improved.abs() < opts.tol {
            break;
        }
    }

    let (energy, assignment) = best.expect("at least one decode");
    let distinct = assignment.is_distinct();
    Ok(MapResult {
        assignment,
        energy,
        dual_bound: Some(dual),
        distinct,
    })
}

/// Like [`mplp_map`] but also reporting the dual value after every pass,
/// for monotonicity checks.
pub fn mplp_dual_trace(m: &SceneMrf, opts: MplpOptions) -> Result<Vec<f64>> {
    check_nonempty(m)?;
    let nb = m.n_boxes;
    let n = m.n_vars;
    let mut lam: Vec<[Vec<f64>; 2]> = m
        .pairwise
        .iter()
        .map(|_| [vec![0.0; nb], vec![0.0; nb]])
        .collect();
    let mut belief: Vec<Vec<f64>> = (0..n)
        .map(|v| {
            m.unary[v]
                .as_ref()
                .map_or_else(|| vec![0.0; nb], |u| u.data().to_vec())
        })
        .collect();
    let mut trace = Vec::new();
    for _ in 0..opts.max_iters {
        for (idx, p) in m.pairwise.iter().enumerate() {
            let table = p.table.data();
            let a_j: Vec<f64> = (0..nb).map(|x| belief[p.j][x] - lam[idx][0][x]).collect();
            let a_k: Vec<f64> = (0..nb).map(|x| belief[p.k][x] - lam[idx][1][x]).collect();
            for xj in 0..nb {
                let mut best_k = f64::INFINITY;
                for xk in 0..nb {
                    best_k = best_k.min(table[xj * nb + xk] + a_k[xk]);
                }
                lam[idx][0][xj] = 0.5 * (best_k - a_j[xj]);
                belief[p.j][xj] = a_j[xj] + lam[idx][0][xj];
            }
            for xk in 0..nb {
                let mut best_j = f64::INFINITY;
                for xj in 0..nb {
                    best_j = best_j.min(table[xj * nb + xk] + a_j[xj]);
                }
                lam[idx][1][xk] = 0.5 * (best_j - a_k[xk]);
                belief[p.k][xk] = a_k[xk] + lam[idx][1][xk];
            }
        }
        let mut total = 0.0;
        for b in &belief {
            total += b.iter().cloned().fold(f64::INFINITY, f64::min);
        }
        for (idx, p) in m.pairwise.iter().enumerate() {
            let table = p.table.data();
            let mut best = f64::INFINITY;
            for xj in 0..nb {
                for xk in 0..nb {
                    best = best.min(table[xj * nb + xk] - lam[idx][0][xj] - lam[idx][1][xk]);
                }
            }
            total += best;
        }
        trace.push(total);
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Annealed distinct refinement
// ---------------------------------------------------------------------------

/// Local energy of variable `v` taking box `b` given the other assignments:
/// its unary term plus all incident pairwise terms.
fn local_energy(m: &SceneMrf, boxes: &[usize], v: usize, b: usize) -> f64 {
    let nb = m.n_boxes;
    let mut e = m.unary[v].as_ref().map_or(0.0, |u| u.data()[b]);
    for p in &m.pairwise {
        if p.j == v {
            e += p.table.data()[b * nb + boxes[p.k]];
        } else if p.k == v {
            e += p.table.data()[boxes[p.j] * nb + b];
        }
    }
    e
}

/// Refine an assignment into the best all-distinct assignment found by
/// simulated annealing.
///
/// The initial assignment is first projected to feasibility greedily (in
/// node order, each conflicted node moves to its lowest-local-energy unused
/// box).  Metropolis then proposes single-variable moves resampled uniformly
/// among boxes unused by the other variables, with a geometric temperature
/// ramp from 1.0 down to 0.01.  The best feasible assignment ever visited is
/// returned, so the result is never worse than the projected start.
pub fn constrained_refine_mcmc(
    m: &SceneMrf,
    init: &Assignment,
    steps: usize,
    seed: u64,
) -> Result<MapResult> {
    check_nonempty(m)?;
    if m.n_vars > m.n_boxes {
        return Err(MapError::Infeasible {
            n_vars: m.n_vars,
            n_boxes: m.n_boxes,
        });
    }
    energy_of_assignment(m, init)?; // validates shape and ranges
    let nb = m.n_boxes;
    let n = m.n_vars;

    // Greedy projection to distinctness, in node order.
    let mut boxes = init.boxes.clone();
    let mut used = vec![false; nb];
    for v in 0..n {
        if !used[boxes[v]] {
            used[boxes[v]] = true;
            continue;
        }
        let mut best_b = None;
        let mut best_e = f64::INFINITY;
        for (b, &taken) in used.iter().enumerate() {
            if taken {
                continue;
            }
            let e = local_energy(m, &boxes, v, b);
            if e < best_e {
                best_e = e;
                best_b = Some(b);
            }
        }
        let b = best_b.expect("n_vars <= n_boxes leaves a free box");
        boxes[v] = b;
        used[b] = true;
    }

    let mut current = boxes;
    let mut current_e = energy_of_assignment(
        m,
        &Assignment {
            boxes: current.clone(),
        },
    )?;
    let mut best = current.clone();
    let mut best_e = current_e;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_start, t_end) = (1.0f64, 0.01f64);
    for t in 0..steps {
        let frac = if steps > 1 {
            t as f64 / (steps - 1) as f64
        } else {
            0.0
        };
        let temp = t_start * (t_end / t_start).powf(frac);

        let v = rng.gen_range(0..n);
        let b_old = current[v];
        // Boxes not used by the *other* variables, minus the no-op.  That
        // set is determined entirely by the other variables, so the proposal
        // stays symmetric and every step is a real move.
        let mut occupied = vec![false; nb];
        for (w, &bw) in current.iter().enumerate() {
            if w != v {
                occupied[bw] = true;
            }
        }
        let free: Vec<usize> = (0..nb).filter(|&b| !occupied[b] && b != b_old).collect();
        if free.is_empty() {
            continue;
        }
        let b_new = free[rng.gen_range(0..free.len())];
        let delta = local_energy(m, &current, v, b_new) - local_energy(m, &current, v, b_old);
        let accept = delta <= 0.0 || rng.gen::<f64>() < (-delta / temp).exp();
        if accept {
            current[v] = b_new;
            current_e += delta;
            if current_e < best_e {
                best_e = current_e;
                best = current.clone();
            }
        }
    }

    let assignment = Assignment { boxes: best };
    // Recompute exactly: the incremental energy only steers the search.
    let energy = energy_of_assignment(m, &assignment)?;
    Ok(MapResult {
        assignment,
        energy,
        dual_bound: None,
        distinct: true,
    })
}
