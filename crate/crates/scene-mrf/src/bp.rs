//! Belief propagation on Scene-MRFs, in the log domain throughout.
//!
//! Message rules (energies `E`, messages `m`, all logs of potentials):
//!
//! 1. variable -> factor: sum of messages from the variable's *other*
//!    factors (zero if there are none);
//! 2. factor -> variable: add the incoming messages from the factor's other
//!    variables to `-E`, then log-sum-exp out those variables;
//! 3. a singly-connected variable sends the zero message, a singly-connected
//!    factor sends `-E` directly;
//! 4. the exponentiated sum of all messages into a variable is proportional
//!    to its marginal, and its log-sum-exp at the schedule root equals the
//!    log partition function.
//!
//! On trees one upward and one downward sweep is exact ([`run_bp`]); the
//! whole computation is expressed with [`Tensor`] operations, so when the
//! factor tables sit on a differentiation tape the marginals and the log
//! partition function are differentiable.  On cyclic graphs [`loopy_bp`]
//! applies the same factor->variable rule under a damped flooding schedule
//! and reports the Bethe approximation of the log partition function (which
//! coincides with the exact value on trees).

use std::collections::BTreeSet;

use crate::autodiff::{Tensor, TensorError};
use crate::graph::{energy_of_assignment, Assignment, GraphError, SceneMrf};

#[derive(Debug, thiserror::Error)]
pub enum BpError {
    #[error("exact propagation requires a tree, but the factor graph has a cycle")]
    Cyclic,
    #[error("exact propagation requires a connected graph ({components} components found)")]
    Disconnected { components: usize },
    #[error("MRF has no variables")]
    Empty,
    #[error("root variable {root} out of range for {n_vars} variables")]
    RootOutOfRange { root: usize, n_vars: usize },
    #[error("damping must lie in [0, 1), got {0}")]
    BadDamping(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, BpError>;

/// One endpoint of a message: a variable index or a factor index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgEndpoint {
    Variable(usize),
    Factor(usize),
}

/// A directed message slot in a propagation schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageSlot {
    pub from: FgEndpoint,
    pub to: FgEndpoint,
}

/// A two-phase (leaves-to-root, root-to-leaves) schedule.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub root: usize,
    pub slots: Vec<MessageSlot>,
    /// Number of leading slots forming the upward phase.
    pub n_up: usize,
}

/// Inference output: per-variable marginals (probability domain, each
/// summing to one) and the log partition function.
#[derive(Debug, Clone)]
pub struct BpResult {
    pub marginals: Vec<Tensor>,
    pub log_partition: Tensor,
    pub converged: bool,
    pub iterations: usize,
}

// ---------------------------------------------------------------------------
// Factor-graph view
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum FactorKind {
    /// Index into `SceneMrf::pairwise`.
    Pair(usize),
    /// Variable whose unary table this factor carries.
    Unary(usize),
}

/// Flattened factor-graph adjacency.  Pairwise factors come first (in their
/// `SceneMrf` order), then unary factors in variable order; each variable
/// lists its factors in factor-id order.
struct FgView<'m> {
    m: &'m SceneMrf,
    factors: Vec<FactorKind>,
    var_adj: Vec<Vec<usize>>,
}

impl<'m> FgView<'m> {
    fn new(m: &'m SceneMrf) -> Self {
        let mut factors = Vec::with_capacity(m.pairwise.len() + m.n_vars);
        for i in 0..m.pairwise.len() {
            factors.push(FactorKind::Pair(i));
        }
        for (v, u) in m.unary.iter().enumerate() {
            if u.is_some() {
                factors.push(FactorKind::Unary(v));
            }
        }
        let mut var_adj = vec![Vec::new(); m.n_vars];
        for (fid, kind) in factors.iter().enumerate() {
            match kind {
                FactorKind::Pair(i) => {
                    var_adj[m.pairwise[*i].j].push(fid);
                    var_adj[m.pairwise[*i].k].push(fid);
                }
                FactorKind::Unary(v) => var_adj[*v].push(fid),
            }
        }
        FgView {
            m,
            factors,
            var_adj,
        }
    }

    fn factor_vars(&self, fid: usize) -> Vec<usize> {
        match self.factors[fid] {
            FactorKind::Pair(i) => vec![self.m.pairwise[i].j, self.m.pairwise[i].k],
            FactorKind::Unary(v) => vec![v],
        }
    }

    /// Position of `v` among the factor's variables.
    fn slot_of(&self, fid: usize, v: usize) -> usize {
        self.factor_vars(fid)
            .iter()
            .position(|&w| w == v)
            .expect("variable incident to factor")
    }
}

// ---------------------------------------------------------------------------
// Scheduling
// ---------------------------------------------------------------------------

/// Build the two-phase schedule rooted at the lowest-indexed variable.
pub fn bp_schedule(m: &SceneMrf) -> Result<Schedule> {
    bp_schedule_rooted(m, 0)
}

/// Build the two-phase schedule rooted at a chosen variable.
pub fn bp_schedule_rooted(m: &SceneMrf, root: usize) -> Result<Schedule> {
    if m.n_vars == 0 {
        return Err(BpError::Empty);
    }
    if root >= m.n_vars {
        return Err(BpError::RootOutOfRange {
            root,
            n_vars: m.n_vars,
        });
    }
    let comps = m.components();
    if comps.len() != 1 {
        return Err(BpError::Disconnected {
            components: comps.len(),
        });
    }
    // Connected, so tree <=> exactly n_vars - 1 pairwise factors (parallel
    // factors push the count over and correctly register as cyclic).
    if m.pairwise.len() != m.n_vars - 1 {
        return Err(BpError::Cyclic);
    }

    let fg = FgView::new(m);
    let mut slots = Vec::new();

    // Upward: post-order emission so every message's inputs precede it.
    fn up(fg: &FgView, v: usize, parent: Option<usize>, slots: &mut Vec<MessageSlot>) {
        for &f in &fg.var_adj[v] {
            if Some(f) == parent {
                continue;
            }
            for w in fg.factor_vars(f) {
                if w == v {
                    continue;
                }
                up(fg, w, Some(f), slots);
                slots.push(MessageSlot {
                    from: FgEndpoint::Variable(w),
                    to: FgEndpoint::Factor(f),
                });
            }
            slots.push(MessageSlot {
                from: FgEndpoint::Factor(f),
                to: FgEndpoint::Variable(v),
            });
        }
    }
    up(&fg, root, None, &mut slots);
    let n_up = slots.len();

    // Downward: pre-order, pushing messages away from the root.
    fn down(fg: &FgView, v: usize, parent: Option<usize>, slots: &mut Vec<MessageSlot>) {
        for &f in &fg.var_adj[v] {
            if Some(f) == parent {
                continue;
            }
            slots.push(MessageSlot {
                from: FgEndpoint::Variable(v),
                to: FgEndpoint::Factor(f),
            });
            for w in fg.factor_vars(f) {
                if w == v {
                    continue;
                }
                slots.push(MessageSlot {
                    from: FgEndpoint::Factor(f),
                    to: FgEndpoint::Variable(w),
                });
                down(fg, w, Some(f), slots);
            }
        }
    }
    down(&fg, root, None, &mut slots);

    Ok(Schedule { root, slots, n_up })
}

// ---------------------------------------------------------------------------
// Exact propagation on trees
// ---------------------------------------------------------------------------

struct MessageStore {
    /// `var_to_fac[fid][slot]`, slot = position of the variable in the factor.
    var_to_fac: Vec<Vec<Option<Tensor>>>,
    /// `fac_to_var[fid][slot]`.
    fac_to_var: Vec<Vec<Option<Tensor>>>,
}

impl MessageStore {
    fn new(fg: &FgView) -> Self {
        let sizes: Vec<usize> = (0..fg.factors.len())
            .map(|f| fg.factor_vars(f).len())
            .collect();
        MessageStore {
            var_to_fac: sizes.iter().map(|&s| vec![None; s]).collect(),
            fac_to_var: sizes.iter().map(|&s| vec![None; s]).collect(),
        }
    }
}

fn compute_var_to_fac(fg: &FgView, store: &MessageStore, v: usize, f: usize) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for &g in &fg.var_adj[v] {
        if g == f {
            continue;
        }
        let slot = fg.slot_of(g, v);
        let msg = store.fac_to_var[g][slot]
            .as_ref()
            .expect("schedule orders dependencies");
        acc = Some(match acc {
            None => msg.clone(),
            Some(a) => a.add(msg)?,
        });
    }
    Ok(acc.unwrap_or_else(|| Tensor::zeros(&[fg.m.n_boxes])))
}

fn compute_fac_to_var(fg: &FgView, store: &MessageStore, f: usize, v: usize) -> Result<Tensor> {
    let n_boxes = fg.m.n_boxes;
    match fg.factors[f] {
        FactorKind::Unary(u) => {
            let table = fg.m.unary[u].as_ref().expect("unary factor has a table");
            Ok(table.neg())
        }
        FactorKind::Pair(i) => {
            let p = &fg.m.pairwise[i];
            let neg = p.table.neg();
            if v == p.k {
                // Message to the destination-side variable: fold in the
                // source-side message (axis 0) and reduce axis 0.
                let m_j = store.var_to_fac[f][0]
                    .as_ref()
                    .expect("schedule orders dependencies");
                let t = neg.add(&m_j.broadcast_axis(1, n_boxes)?)?;
                Ok(t.logsumexp(0)?)
            } else {
                let m_k = store.var_to_fac[f][1]
                    .as_ref()
                    .expect("schedule orders dependencies");
                let t = neg.add(&m_k.broadcast_axis(0, n_boxes)?)?;
                Ok(t.logsumexp(1)?)
            }
        }
    }
}

/// Exact sum-product on a tree-structured Scene-MRF.
///
/// Differentiable when the factor tables are on a tape.  The log partition
/// function is read off at the schedule root and is invariant to the root
/// choice.
pub fn run_bp(m: &SceneMrf) -> Result<BpResult> {
    run_bp_rooted(m, 0)
}

/// [`run_bp`] with an explicit root (the root only changes message order,
/// not the results).
pub fn run_bp_rooted(m: &SceneMrf, root: usize) -> Result<BpResult> {
    let schedule = bp_schedule_rooted(m, root)?;
    let fg = FgView::new(m);
    let mut store = MessageStore::new(&fg);
    for slot in &schedule.slots {
        match (slot.from, slot.to) {
            (FgEndpoint::Variable(v), FgEndpoint::Factor(f)) => {
                let msg = compute_var_to_fac(&fg, &store, v, f)?;
                let s = fg.slot_of(f, v);
                store.var_to_fac[f][s] = Some(msg);
            }
            (FgEndpoint::Factor(f), FgEndpoint::Variable(v)) => {
                let msg = compute_fac_to_var(&fg, &store, f, v)?;
                let s = fg.slot_of(f, v);
                store.fac_to_var[f][s] = Some(msg);
            }
            _ => unreachable!("schedules alternate variable/factor endpoints"),
        }
    }

    let mut beliefs = Vec::with_capacity(m.n_vars);
    for v in 0..m.n_vars {
        let mut acc: Option<Tensor> = None;
        for &f in &fg.var_adj[v] {
            let s = fg.slot_of(f, v);
            let msg = store.fac_to_var[f][s]
                .as_ref()
                .expect("both phases fill every factor-to-variable slot");
            acc = Some(match acc {
                None => msg.clone(),
                Some(a) => a.add(msg)?,
            });
        }
        beliefs.push(acc.unwrap_or_else(|| Tensor::zeros(&[m.n_boxes])));
    }

    let log_partition = beliefs[schedule.root].logsumexp(0)?;
    let marginals = beliefs
        .iter()
        .map(|b| {
            let z = b.logsumexp(0)?;
            Ok(b.sub(&z)?.exp())
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(BpResult {
        marginals,
        log_partition,
        converged: true,
        iterations: 1,
    })
}

/// Differentiable log-partition function of a tree-structured MRF.
pub fn log_partition(m: &SceneMrf) -> Result<Tensor> {
    Ok(run_bp(m)?.log_partition)
}

/// Differentiable negative log-likelihood `E(a) + log Z` of a complete
/// assignment on a tree-structured MRF.
pub fn nll_of_assignment(m: &SceneMrf, a: &Assignment) -> Result<Tensor> {
    // Validates lengths / box ranges as a side effect.
    energy_of_assignment(m, a)?;
    let bp = run_bp(m)?;
    let mut total = bp.log_partition;
    for (i, u) in m.unary.iter().enumerate() {
        if let Some(u) = u {
            let picked = u.gather(0, &[a.boxes[i]])?.reshape(&[])?;
            total = total.add(&picked)?;
        }
    }
    let nb = m.n_boxes;
    for p in &m.pairwise {
        let flat = p.table.reshape(&[nb * nb])?;
        let picked = flat
            .gather(0, &[a.boxes[p.j] * nb + a.boxes[p.k]])?
            .reshape(&[])?;
        total = total.add(&picked)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Loopy propagation
// ---------------------------------------------------------------------------

/// Settings for the damped flooding schedule.
#[derive(Debug, Clone, Copy)]
pub struct LoopyOptions {
    /// Fraction of the previous message kept at each update, in `[0, 1)`.
    pub damping: f64,
    /// Convergence threshold on the max absolute message change.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LoopyOptions {
    fn default() -> Self {
        LoopyOptions {
            damping: 0.5,
            tol: 1e-6,
            max_iters: 50,
        }
    }
}

fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 })
        .sum()
}

fn normalize_log(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_finite() {
        for x in v.iter_mut() {
            *x -= m;
        }
    }
}

fn softmax_from_logs(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for x in &mut out {
        *x /= z;
    }
    out
}

/// Damped sum-product with a synchronous (flooding) schedule.
///
/// Works on any Scene-MRF, cyclic or not, including disconnected ones.
/// Marginals are the usual belief read-out; `log_partition` is the Bethe
/// free-energy approximation, exact on trees.  Plain `f64` computation:
/// the result never records onto a tape.
pub fn loopy_bp(m: &SceneMrf, opts: LoopyOptions) -> Result<BpResult> {
    if m.n_vars == 0 {
        return Err(BpError::Empty);
    }
    if !(0.0..1.0).contains(&opts.damping) {
        return Err(BpError::BadDamping(opts.damping));
    }
    let fg = FgView::new(m);
    let nb = m.n_boxes;
    let n_fac = fg.factors.len();
    let slots: Vec<usize> = (0..n_fac).map(|f| fg.factor_vars(f).len()).collect();

    let mut var_to_fac: Vec<Vec<Vec<f64>>> =
        slots.iter().map(|&s| vec![vec![0.0; nb]; s]).collect();
    let mut fac_to_var: Vec<Vec<Vec<f64>>> =
        slots.iter().map(|&s| vec![vec![0.0; nb]; s]).collect();

    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        iterations += 1;
        // Variable -> factor from the previous factor -> variable round.
        for (f, slots) in var_to_fac.iter_mut().enumerate() {
            for (s, &v) in fg.factor_vars(f).iter().enumerate() {
                let mut msg = vec![0.0; nb];
                for &g in &fg.var_adj[v] {
                    if g == f {
                        continue;
                    }
                    let gs = fg.slot_of(g, v);
                    for b in 0..nb {
                        msg[b] += fac_to_var[g][gs][b];
                    }
                }
                slots[s] = msg;
            }
        }
        // Factor -> variable, damped then normalized.
        let mut max_delta: f64 = 0.0;
        for f in 0..n_fac {
            let fresh: Vec<Vec<f64>> = match fg.factors[f] {
                FactorKind::Unary(u) => {
                    let table = m.unary[u].as_ref().expect("unary table").data();
                    vec![table.iter().map(|&e| -e).collect()]
                }
                FactorKind::Pair(i) => {
                    let p = &m.pairwise[i];
                    let table = p.table.data();
                    let m_j = &var_to_fac[f][0];
                    let m_k = &var_to_fac[f][1];
                    // To k: lse over axis 0 of (-e[bj,bk] + m_j[bj]).
                    let mut to_k = vec![0.0; nb];
                    for bk in 0..nb {
                        let mut mx = f64::NEG_INFINITY;
                        for bj in 0..nb {
                            mx = mx.max(-table[bj * nb + bk] + m_j[bj]);
                        }
                        let mut s = 0.0;
                        for bj in 0..nb {
                            s += (-table[bj * nb + bk] + m_j[bj] - mx).exp();
                        }
                        to_k[bk] = mx + s.ln();
                    }
                    // To j: lse over axis 1 of (-e[bj,bk] + m_k[bk]).
                    let mut to_j = vec![0.0; nb];
                    for bj in 0..nb {
                        let row = &table[bj * nb..(bj + 1) * nb];
                        let mut mx = f64::NEG_INFINITY;
                        for bk in 0..nb {
                            mx = mx.max(-row[bk] + m_k[bk]);
                        }
                        let mut s = 0.0;
                        for bk in 0..nb {
                            s += (-row[bk] + m_k[bk] - mx).exp();
                        }
                        to_j[bj] = mx + s.ln();
                    }
                    vec![to_j, to_k]
                }
            };
            for (s, mut new_msg) in fresh.into_iter().enumerate() {
                let old = &mut fac_to_var[f][s];
                for b in 0..nb {
                    new_msg[b] = (1.0 - opts.damping) * new_msg[b] + opts.damping * old[b];
                }
                normalize_log(&mut new_msg);
                for b in 0..nb {
                    max_delta = max_delta.max((new_msg[b] - old[b]).abs());
                }
                *old = new_msg;
            }
        }
        if max_delta < opts.tol {
            converged = true;
            break;
        }
    }

    // Beliefs.
    let mut var_beliefs: Vec<Vec<f64>> = Vec::with_capacity(m.n_vars);
    for v in 0..m.n_vars {
        let mut b = vec![0.0; nb];
        for &f in &fg.var_adj[v] {
            let s = fg.slot_of(f, v);
            for x in 0..nb {
                b[x] += fac_to_var[f][s][x];
            }
        }
        var_beliefs.push(b);
    }
    let marginals_raw: Vec<Vec<f64>> = var_beliefs.iter().map(|b| softmax_from_logs(b)).collect();

    // Bethe approximation of log Z:
    //   log Z = sum_f H(b_f) - sum_v (deg(v) - 1) H(b_v) - sum_f E_f[b_f].
    let mut log_z = 0.0;
    for (f, &factor) in fg.factors.iter().enumerate() {
        match factor {
            FactorKind::Unary(u) => {
                let table = m.unary[u].as_ref().expect("unary table").data();
                let logs: Vec<f64> = (0..nb).map(|b| -table[b] + var_to_fac[f][0][b]).collect();
                let bf = softmax_from_logs(&logs);
                log_z += entropy(&bf);
                log_z -= bf
                    .iter()
                    .zip(table.iter())
                    .map(|(&p, &e)| p * e)
                    .sum::<f64>();
            }
            FactorKind::Pair(i) => {
                let p = &m.pairwise[i];
                let table = p.table.data();
                let m_j = &var_to_fac[f][0];
                let m_k = &var_to_fac[f][1];
                let mut logs = vec![0.0; nb * nb];
                for bj in 0..nb {
                    for bk in 0..nb {
                        logs[bj * nb + bk] = -table[bj * nb + bk] + m_j[bj] + m_k[bk];
                    }
                }
                let bf = softmax_from_logs(&logs);
                log_z += entropy(&bf);
                log_z -= bf
                    .iter()
                    .zip(table.iter())
                    .map(|(&p, &e)| p * e)
                    .sum::<f64>();
            }
        }
    }
    for (v, adj) in fg.var_adj.iter().enumerate() {
        let deg = adj.len();
        if deg == 0 {
            // Isolated variable: uniform belief contributes ln(n_boxes).
            log_z += (nb as f64).ln();
        } else {
            log_z -= (deg as f64 - 1.0) * entropy(&marginals_raw[v]);
        }
    }

    let marginals = marginals_raw
        .into_iter()
        .map(|p| Tensor::from_vec(&[nb], p).expect("marginal shape"))
        .collect();
    Ok(BpResult {
        marginals,
        log_partition: Tensor::scalar(log_z),
        converged,
        iterations,
    })
}

/// Marginal inference on an arbitrary Scene-MRF: exact tree propagation per
/// connected component where possible, loopy propagation otherwise, results
/// stitched back together (`log Z` adds across components).
pub fn infer_marginals(m: &SceneMrf, opts: LoopyOptions) -> Result<BpResult> {
    if m.n_vars == 0 {
        return Err(BpError::Empty);
    }
    let mut marginals: Vec<Option<Tensor>> = vec![None; m.n_vars];
    let mut log_partition = Tensor::scalar(0.0);
    let mut converged = true;
    let mut iterations = 0;
    for (members, sub) in m.components() {
        let res = if sub.is_tree() {
            run_bp(&sub)?
        } else {
            loopy_bp(&sub, opts)?
        };
        converged &= res.converged;
        iterations = iterations.max(res.iterations);
        log_partition = log_partition.add(&res.log_partition)?;
        for (local, &global) in members.iter().enumerate() {
            marginals[global] = Some(res.marginals[local].clone());
        }
    }
    Ok(BpResult {
        marginals: marginals
            .into_iter()
            .map(|m| m.expect("all components covered"))
            .collect(),
        log_partition,
        converged,
        iterations,
    })
}

/// Variables reachable from each other through pairwise factors — exposed
/// for tests that need to cross-check component splitting.
pub fn variable_components(m: &SceneMrf) -> Vec<BTreeSet<usize>> {
    m.components()
        .into_iter()
        .map(|(members, _)| members.into_iter().collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::PairFactor;

    fn chain_mrf(nb: usize, tables: &[Vec<f64>], unaries: &[(usize, Vec<f64>)]) -> SceneMrf {
        let n_vars = tables.len() + 1;
        let mut unary = vec![None; n_vars];
        for (v, u) in unaries {
            unary[*v] = Some(Tensor::from_vec(&[nb], u.clone()).unwrap());
        }
        let pairwise = tables
            .iter()
            .enumerate()
            .map(|(i, t)| PairFactor {
                j: i,
                k: i + 1,
                table: Tensor::from_vec(&[nb, nb], t.clone()).unwrap(),
            })
            .collect();
        SceneMrf::from_factors(n_vars, nb, unary, pairwise).unwrap()
    }

    #[test]
    fn single_variable_zero_unary_is_uniform() {
        let m = SceneMrf::from_factors(1, 4, vec![Some(Tensor::zeros(&[4]))], vec![]).unwrap();
        let res = run_bp(&m).unwrap();
        for &p in res.marginals[0].data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
        assert!((res.log_partition.item() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn three_chain_schedule_matches_hand_derivation() {
        // a1 -e1- a2 -e2- a3 with a unary v1 on a2; rooted at a3 the upward
        // sweep must be: a1->e1, e1->a2, v1->a2, a2->e2, e2->a3.
        let m = chain_mrf(2, &[vec![0.0; 4], vec![0.0; 4]], &[(1, vec![0.0, 0.0])]);
        let s = bp_schedule_rooted(&m, 2).unwrap();
        use FgEndpoint::{Factor as F, Variable as V};
        let up: Vec<MessageSlot> = s.slots[..s.n_up].to_vec();
        assert_eq!(
            up,
            vec![
                MessageSlot {
                    from: V(0),
                    to: F(0)
                },
                MessageSlot {
                    from: F(0),
                    to: V(1)
                },
                MessageSlot {
                    from: F(2),
                    to: V(1)
                },
                MessageSlot {
                    from: V(1),
                    to: F(1)
                },
                MessageSlot {
                    from: F(1),
                    to: V(2)
                },
            ]
        );
        // Both phases together cover each direction exactly once.
        assert_eq!(s.slots.len(), 10);
        let unique: BTreeSet<String> = s.slots.iter().map(|x| format!("{x:?}")).collect();
        assert_eq!(unique.len(), 10);
    }

    #[test]
    fn log_partition_is_root_invariant() {
        let m = chain_mrf(
            3,
            &[
                vec![0.3, -0.2, 0.6, 1.0, -0.4, 0.1, 0.0, 0.9, -1.1],
                vec![-0.5, 0.2, 0.7, 0.3, 0.8, -0.9, 0.1, -0.3, 0.4],
            ],
            &[(0, vec![0.1, -0.6, 0.3]), (2, vec![0.5, 0.0, -0.2])],
        );
        let z0 = run_bp_rooted(&m, 0).unwrap().log_partition.item();
        for root in 1..3 {
            let z = run_bp_rooted(&m, root).unwrap().log_partition.item();
            assert!((z - z0).abs() < 1e-10, "root {root}: {z} vs {z0}");
        }
    }

    #[test]
    fn cyclic_or_disconnected_inputs_are_rejected() {
        let t = Tensor::zeros(&[2, 2]);
        let cyc = SceneMrf::from_factors(
            3,
            2,
            vec![None, None, None],
            vec![
                PairFactor {
                    j: 0,
                    k: 1,
                    table: t.clone(),
                },
                PairFactor {
                    j: 1,
                    k: 2,
                    table: t.clone(),
                },
                PairFactor {
                    j: 2,
                    k: 0,
                    table: t.clone(),
                },
            ],
        )
        .unwrap();
        assert!(matches!(run_bp(&cyc), Err(BpError::Cyclic)));
        let disc = SceneMrf::from_factors(2, 2, vec![None, None], vec![]).unwrap();
        assert!(matches!(run_bp(&disc), Err(BpError::Disconnected { .. })));
        // infer_marginals handles both.
        assert!(infer_marginals(&cyc, LoopyOptions::default()).is_ok());
        assert!(infer_marginals(&disc, LoopyOptions::default()).is_ok());
    }

    #[test]
    fn loopy_on_zero_energy_cycle_is_uniform_with_unary_softmax() {
        // 3-cycle with zero pairwise tables: marginals are softmax(-unary).
        let u = vec![0.4, -0.3];
        let t = Tensor::zeros(&[2, 2]);
        let m = SceneMrf::from_factors(
            3,
            2,
            vec![
                Some(Tensor::from_vec(&[2], u.clone()).unwrap()),
                Some(Tensor::zeros(&[2])),
                Some(Tensor::zeros(&[2])),
            ],
            vec![
                PairFactor {
                    j: 0,
                    k: 1,
                    table: t.clone(),
                },
                PairFactor {
                    j: 1,
                    k: 2,
                    table: t.clone(),
                },
                PairFactor {
                    j: 2,
                    k: 0,
                    table: t.clone(),
                },
            ],
        )
        .unwrap();
        let res = loopy_bp(&m, LoopyOptions::default()).unwrap();
        assert!(res.converged);
        let expect = softmax_from_logs(&[-u[0], -u[1]]);
        for (p, e) in res.marginals[0].data().iter().zip(expect.iter()) {
            assert!((p - e).abs() < 1e-6);
        }
        for &p in res.marginals[1].data() {
            assert!((p - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn loopy_matches_exact_bp_on_trees_including_log_z() {
        let m = chain_mrf(
            3,
            &[
                vec![0.3, -0.2, 0.6, 1.0, -0.4, 0.1, 0.0, 0.9, -1.1],
                vec![-0.5, 0.2, 0.7, 0.3, 0.8, -0.9, 0.1, -0.3, 0.4],
            ],
            &[(1, vec![0.2, -0.1, 0.4])],
        );
        let exact = run_bp(&m).unwrap();
        for damping in [0.0, 0.5] {
            let loopy = loopy_bp(
                &m,
                LoopyOptions {
                    damping,
                    tol: 1e-10,
                    max_iters: 200,
                },
            )
            .unwrap();
            assert!(loopy.converged);
            for (a, b) in exact.marginals.iter().zip(loopy.marginals.iter()) {
                for (x, y) in a.data().iter().zip(b.data().iter()) {
                    assert!((x - y).abs() < 1e-6, "marginal mismatch {x} vs {y}");
                }
            }
            let dz = (exact.log_partition.item() - loopy.log_partition.item()).abs();
            assert!(dz < 1e-6, "log Z mismatch {dz} at damping {damping}");
        }
    }

    #[test]
    fn marginals_sum_to_one() {
        let m = chain_mrf(
            4,
            &[(0..16).map(|i| (i as f64 * 0.37).sin()).collect()],
            &[(0, vec![0.3, -0.2, 0.1, 0.0])],
        );
        let res = run_bp(&m).unwrap();
        for marg in &res.marginals {
            let s: f64 = marg.data().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
