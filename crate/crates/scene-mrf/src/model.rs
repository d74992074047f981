//! Trainable energy model: per-box features with one round of attention
//! mixing, a 2-layer unary energy head, and a 3-layer pairwise energy head.
//!
//! Parameters are plain named arrays ([`EnergyModelParams`]); every loss
//! evaluation stages them as leaves on a fresh tape, so gradients come from
//! one `backward` call per item and nothing persists between steps.  The
//! training loss ([`grounding_loss`]) scores the ground-truth assignment
//! under an exact tree model: cyclic queries are first thinned to a random
//! spanning tree per connected component, then the negative log-likelihood
//! is computed by belief propagation.  A node-conditional pseudo-likelihood
//! loss is available as an alternative that needs no tree extraction.
//!
//! Everything is deterministic: batches, category dropout, and spanning
//! trees derive their randomness from (config seed, step, slot), so resuming
//! from a checkpoint continues the exact trajectory of an unbroken run.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Tape, Tensor, TensorError};
use crate::bp::{nll_of_assignment, BpError};
use crate::graph::{build_scene_mrf, Assignment, CandidateSet, GraphError, QueryGraph, Vocabulary};
use crate::posenc::{encode_box, FrequencySet, PosencError};
use crate::spanning::{connected_components, random_spanning_tree, SpanningError};
use crate::util::mix_seed;

/// Largest candidate count for which the pairwise head will materialize its
/// `N_b x N_b` concatenated-feature matrix, unless a config raises it.
pub const DEFAULT_PAIRWISE_BOX_GUARD: usize = 64;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("candidate features have {got} entries, model expects {expected}")]
    FeatureDimMismatch { got: usize, expected: usize },
    #[error("frequency set has {got} pairs, model expects {expected}")]
    FreqDimMismatch { got: usize, expected: usize },
    #[error("pairwise energies over {n_boxes} boxes exceed the guard of {guard}")]
    PairwiseGuard { n_boxes: usize, guard: usize },
    #[error("assignment covers {got} nodes but the query has {expected}")]
    GtLengthMismatch { got: usize, expected: usize },
    #[error("ground-truth box {box_idx} for node {node} out of range ({n_boxes} candidates)")]
    GtOutOfRange {
        node: usize,
        box_idx: usize,
        n_boxes: usize,
    },
    #[error("query has no nodes")]
    EmptyQuery,
    #[error("gradient set does not align with parameters at {name}")]
    GradMismatch { name: String },
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("checkpoint version {got} unsupported (expected {expected})")]
    CheckpointVersion { got: u32, expected: u32 },
    #[error("checkpoint I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error(transparent)]
    Posenc(#[from] PosencError),
    #[error(transparent)]
    Spanning(#[from] SpanningError),
}

type Result<T> = std::result::Result<T, ModelError>;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Sizes every parameter shape derives from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Length of the raw per-candidate feature vector.
    pub raw_feat: usize,
    /// Number of frequency pairs; the positional part adds `2 * n_freq_pairs`.
    pub n_freq_pairs: usize,
    pub hidden: usize,
    pub n_objects: usize,
    pub n_relations: usize,
    /// Candidate-count guard for the pairwise head.
    pub max_pairwise_boxes: usize,
}

impl ModelDims {
    /// Width of a mixed per-box feature row.
    pub fn feat_dim(&self) -> usize {
        self.raw_feat + 2 * self.n_freq_pairs
    }
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        ParamTensor {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// All trainable parameters, in a fixed named order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyModelParams {
    pub dims: ModelDims,
    pub entries: Vec<(String, ParamTensor)>,
}

fn param_shapes(dims: &ModelDims) -> Vec<(&'static str, Vec<usize>)> {
    let d = dims.feat_dim();
    let h = dims.hidden;
    vec![
        ("mixer.wq", vec![d, d]),
        ("mixer.wk", vec![d, d]),
        ("mixer.wv", vec![d, d]),
        ("mixer.wo", vec![d, d]),
        ("unary.w1", vec![d, h]),
        ("unary.b1", vec![h]),
        ("unary.w2", vec![h, dims.n_objects]),
        ("unary.b2", vec![dims.n_objects]),
        ("pair.w1", vec![2 * d, h]),
        ("pair.b1", vec![h]),
        ("pair.w2", vec![h, h]),
        ("pair.b2", vec![h]),
        ("pair.w3", vec![h, dims.n_relations]),
        ("pair.b3", vec![dims.n_relations]),
    ]
}

impl EnergyModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let entries = param_shapes(&dims)
            .into_iter()
            .map(|(name, shape)| (name.to_string(), ParamTensor::zeros(shape)))
            .collect();
        EnergyModelParams { dims, entries }
    }

    /// Uniform init scaled by 1/sqrt(fan-in) for matrices; biases start at
    /// zero.
    pub fn random(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = param_shapes(&dims)
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 1 {
                    ParamTensor::zeros(shape)
                } else {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    let n = shape.iter().product();
                    ParamTensor {
                        shape,
                        data: (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                    }
                };
                (name.to_string(), t)
            })
            .collect();
        EnergyModelParams { dims, entries }
    }

    pub fn get(&self, name: &str) -> &ParamTensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data.len()).sum()
    }
}

/// Parameters staged as leaves on a tape for one differentiable evaluation.
pub struct StagedParams {
    pub dims: ModelDims,
    pub entries: Vec<(String, Tensor)>,
}

impl StagedParams {
    fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }
}

pub fn stage_params(p: &EnergyModelParams, tape: &Tape) -> StagedParams {
    let entries = p
        .entries
        .iter()
        .map(|(name, t)| {
            let leaf = tape
                .leaf_from(&t.shape, t.data.clone())
                .expect("stored parameter shapes are consistent");
            (name.clone(), leaf)
        })
        .collect();
    StagedParams {
        dims: p.dims.clone(),
        entries,
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Constant input features: raw detector-style vector concatenated with the
/// box's range encoding, one row per candidate.
pub fn input_features(c: &CandidateSet, f: &FrequencySet, dims: &ModelDims) -> Result<Tensor> {
    if f.len() != dims.n_freq_pairs {
        return Err(ModelError::FreqDimMismatch {
            got: f.len(),
            expected: dims.n_freq_pairs,
        });
    }
    let d = dims.feat_dim();
    let nb = c.boxes.len();
    let mut data = Vec::with_capacity(nb * d);
    for (feat, b) in c.features.iter().zip(&c.boxes) {
        if feat.len() != dims.raw_feat {
            return Err(ModelError::FeatureDimMismatch {
                got: feat.len(),
                expected: dims.raw_feat,
            });
        }
        data.extend_from_slice(feat);
        data.extend_from_slice(&encode_box(b, f)?.values);
    }
    Ok(Tensor::from_vec(&[nb, d], data)?)
}

/// Row-stochastic attention matrix over candidates.
pub fn attention_weights(sp: &StagedParams, x0: &Tensor) -> Result<Tensor> {
    let nb = x0.shape()[0];
    let q = x0.matmul(sp.get("mixer.wq"))?;
    let k = x0.matmul(sp.get("mixer.wk"))?;
    let scale = 1.0 / (sp.dims.feat_dim() as f64).sqrt();
    let scores = q.matmul(&k.permute(&[1, 0])?)?.scale(scale);
    let norm = scores.logsumexp(1)?.broadcast_axis(1, nb)?;
    Ok(scores.sub(&norm)?.exp())
}

/// Mix candidate features through one attention layer with a residual
/// connection.
pub fn compute_features(sp: &StagedParams, c: &CandidateSet, f: &FrequencySet) -> Result<Tensor> {
    let x0 = input_features(c, f, &sp.dims)?;
    let a = attention_weights(sp, &x0)?;
    let v = x0.matmul(sp.get("mixer.wv"))?;
    let ctx = a.matmul(&v)?.matmul(sp.get("mixer.wo"))?;
    Ok(x0.add(&ctx)?)
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let rows = x.shape()[0];
    Ok(x.matmul(w)?.add(&b.broadcast_axis(0, rows)?)?)
}

/// Per-candidate category energies, `N_b x n_objects`.
pub fn unary_energies(sp: &StagedParams, feats: &Tensor) -> Result<Tensor> {
    let h = affine(feats, sp.get("unary.w1"), sp.get("unary.b1"))?.relu();
    affine(&h, sp.get("unary.w2"), sp.get("unary.b2"))
}

/// Ordered-pair relation energies, `N_b x N_b x n_relations`.
///
/// Entry `(b, b', r)` comes from the concatenation `(feat_b, feat_b')`, so
/// the table is deliberately asymmetric in its first two axes.
pub fn pairwise_energies(sp: &StagedParams, feats: &Tensor) -> Result<Tensor> {
    let nb = feats.shape()[0];
    if nb > sp.dims.max_pairwise_boxes {
        return Err(ModelError::PairwiseGuard {
            n_boxes: nb,
            guard: sp.dims.max_pairwise_boxes,
        });
    }
    let rows: Vec<usize> = (0..nb * nb).map(|r| r / nb).collect();
    let cols: Vec<usize> = (0..nb * nb).map(|r| r % nb).collect();
    let left = feats.gather(0, &rows)?;
    let right = feats.gather(0, &cols)?;
    let pairs = left.concat(&right, 1)?;
    let h1 = affine(&pairs, sp.get("pair.w1"), sp.get("pair.b1"))?.relu();
    let h2 = affine(&h1, sp.get("pair.w2"), sp.get("pair.b2"))?.relu();
    let out = affine(&h2, sp.get("pair.w3"), sp.get("pair.b3"))?;
    Ok(out.reshape(&[nb, nb, sp.dims.n_relations])?)
}

/// Inference-only forward pass: unary and pairwise energy tables for a
/// candidate set, detached from any differentiation tape.
pub fn forward_energies(
    p: &EnergyModelParams,
    c: &CandidateSet,
    f: &FrequencySet,
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let sp = stage_params(p, &tape);
    let feats = compute_features(&sp, c, f)?;
    let u = unary_energies(&sp, &feats)?;
    let e = pairwise_energies(&sp, &feats)?;
    Ok((u.detached(), e.detached()))
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Replace each node's category with the wildcard independently with
/// probability `p`.
pub fn category_dropout(q: &QueryGraph, p: f64, seed: u64) -> QueryGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = q.clone();
    for node in &mut out.nodes {
        if rng.gen::<f64>() < p {
            node.is_generic = true;
        }
    }
    out
}

/// A differentiable loss value together with the staged parameters (for
/// gradient extraction) and the tape that recorded it.
pub struct LossEval {
    pub loss: Tensor,
    pub staged: StagedParams,
    pub tape: Tape,
}

fn check_gt(q: &QueryGraph, gt: &Assignment, n_boxes: usize) -> Result<()> {
    if q.nodes.is_empty() {
        return Err(ModelError::EmptyQuery);
    }
    if gt.boxes.len() != q.nodes.len() {
        return Err(ModelError::GtLengthMismatch {
            got: gt.boxes.len(),
            expected: q.nodes.len(),
        });
    }
    for (i, &b) in gt.boxes.iter().enumerate() {
        if b >= n_boxes {
            return Err(ModelError::GtOutOfRange {
                node: i,
                box_idx: b,
                n_boxes,
            });
        }
    }
    Ok(())
}

/// Edges sorted by content so downstream choices (spanning trees, summation
/// order) cannot depend on the order a query happened to list them in.
fn canonical_edges(q: &QueryGraph) -> QueryGraph {
    let mut out = q.clone();
    out.edges.sort_by_key(|e| (e.src, e.dst, e.relation));
    out
}

/// Extract the sub-query induced by `members` (ascending node ids), with
/// node ids renumbered contiguously, plus the matching slice of `gt`.
fn subquery(q: &QueryGraph, members: &[usize], gt: &Assignment) -> (QueryGraph, Assignment) {
    let renumber = |id: usize| members.iter().position(|&m| m == id).unwrap() + 1;
    let nodes = members
        .iter()
        .map(|&id| {
            let mut n = q.nodes[q.node_index(id).unwrap()].clone();
            n.id = renumber(n.id);
            n
        })
        .collect();
    let edges = q
        .edges
        .iter()
        .filter(|e| members.contains(&e.src) && members.contains(&e.dst))
        .map(|e| {
            let mut e = e.clone();
            e.src = renumber(e.src);
            e.dst = renumber(e.dst);
            e
        })
        .collect();
    let boxes = members
        .iter()
        .map(|&id| gt.boxes[q.node_index(id).unwrap()])
        .collect();
    (QueryGraph { nodes, edges }, Assignment { boxes })
}

/// Negative log-likelihood of the ground-truth assignment under the model.
///
/// Cyclic or disconnected queries are handled by thinning each connected
/// component to a random spanning tree (seeded; a tree component is returned
/// unchanged for every seed) and summing component losses.
pub fn grounding_loss(
    p: &EnergyModelParams,
    c: &CandidateSet,
    q: &QueryGraph,
    gt: &Assignment,
    f: &FrequencySet,
    seed: u64,
) -> Result<LossEval> {
    check_gt(q, gt, c.boxes.len())?;
    let tape = Tape::new();
    let sp = stage_params(p, &tape);
    let feats = compute_features(&sp, c, f)?;
    let u = unary_energies(&sp, &feats)?;
    let e = pairwise_energies(&sp, &feats)?;

    let canon = canonical_edges(q);
    let mut total: Option<Tensor> = None;
    for (ci, members) in connected_components(&canon).iter().enumerate() {
        let (sub_q, sub_gt) = subquery(&canon, members, gt);
        let tree = random_spanning_tree(&sub_q, mix_seed(&[seed, ci as u64]))?;
        let mrf = build_scene_mrf(&tree, &u, &e)?;
        let nll = nll_of_assignment(&mrf, &sub_gt)?;
        total = Some(match total {
            None => nll,
            Some(t) => t.add(&nll)?,
        });
    }
    Ok(LossEval {
        loss: total.expect("non-empty query has components"),
        staged: sp,
        tape,
    })
}

/// Node-conditional pseudo-likelihood: for each node, the negative log of
/// its conditional probability given its neighbors clamped to ground truth.
/// Works directly on cyclic queries; no partition function is needed.
pub fn pseudo_likelihood_loss(
    p: &EnergyModelParams,
    c: &CandidateSet,
    q: &QueryGraph,
    gt: &Assignment,
    f: &FrequencySet,
) -> Result<LossEval> {
    check_gt(q, gt, c.boxes.len())?;
    let tape = Tape::new();
    let sp = stage_params(p, &tape);
    let feats = compute_features(&sp, c, f)?;
    let u = unary_energies(&sp, &feats)?;
    let e = pairwise_energies(&sp, &feats)?;
    let mrf = build_scene_mrf(&canonical_edges(q), &u, &e)?;
    let nb = c.boxes.len();

    let mut total: Option<Tensor> = None;
    for v in 0..mrf.n_vars {
        // Energy of node v as a function of its own box, neighbors clamped.
        let mut ev = match &mrf.unary[v] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&[nb]),
        };
        for fac in &mrf.pairwise {
            if fac.j == v {
                let row = fac.table.gather(1, &[gt.boxes[fac.k]])?.reshape(&[nb])?;
                ev = ev.add(&row)?;
            } else if fac.k == v {
                let col = fac.table.gather(0, &[gt.boxes[fac.j]])?.reshape(&[nb])?;
                ev = ev.add(&col)?;
            }
        }
        let picked = ev.gather(0, &[gt.boxes[v]])?.reshape(&[])?;
        let log_norm = ev.neg().logsumexp(0)?;
        let nll_v = picked.add(&log_norm)?;
        total = Some(match total {
            None => nll_v,
            Some(t) => t.add(&nll_v)?,
        });
    }
    Ok(LossEval {
        loss: total.expect("non-empty query"),
        staged: sp,
        tape,
    })
}

// ---------------------------------------------------------------------------
// Gradients and optimization
// ---------------------------------------------------------------------------

/// Gradients aligned with [`EnergyModelParams::entries`].
#[derive(Debug, Clone)]
pub struct GradSet {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl GradSet {
    pub fn zeros_like(p: &EnergyModelParams) -> Self {
        GradSet {
            entries: p
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), vec![0.0; t.data.len()]))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &GradSet) -> Result<()> {
        for ((name, mine), (oname, theirs)) in self.entries.iter_mut().zip(&other.entries) {
            if name != oname || mine.len() != theirs.len() {
                return Err(ModelError::GradMismatch { name: name.clone() });
            }
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (_, g) in &mut self.entries {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Differentiate a loss and read back one gradient array per parameter.
/// Parameters the loss never touched get zero gradients.
pub fn param_gradients(eval: &LossEval) -> Result<GradSet> {
    let gm = backward(&eval.loss)?;
    let entries = eval
        .staged
        .entries
        .iter()
        .map(|(name, t)| {
            let g = gm
                .wrt(t)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (name.clone(), g)
        })
        .collect();
    Ok(GradSet { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub category_dropout_p: f64,
    pub seed: u64,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            steps: 500,
            category_dropout_p: 0.2,
            seed: 0,
            hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            problems.push("learning_rate must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problems.push("beta1/beta2 must lie in [0, 1)");
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            problems.push("epsilon must be positive and finite");
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive");
        }
        if self.steps == 0 {
            problems.push("steps must be positive");
        }
        if !(0.0..=1.0).contains(&self.category_dropout_p) {
            problems.push("category_dropout_p must lie in [0, 1]");
        }
        if self.hidden == 0 {
            problems.push("hidden must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::BadConfig(problems.join("; ")))
        }
    }
}

/// First/second-moment state for Adam, aligned with the parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<ParamTensor>,
    pub v: Vec<ParamTensor>,
}

impl AdamState {
    pub fn new(p: &EnergyModelParams) -> Self {
        let zeros: Vec<ParamTensor> = p
            .entries
            .iter()
            .map(|(_, t)| ParamTensor::zeros(t.shape.clone()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    p: &mut EnergyModelParams,
    grads: &GradSet,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.entries.len() != p.entries.len() {
        return Err(ModelError::GradMismatch {
            name: "<count>".to_string(),
        });
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, (name, param)) in p.entries.iter_mut().enumerate() {
        let (gname, g) = &grads.entries[i];
        if gname != name || g.len() != param.data.len() {
            return Err(ModelError::GradMismatch { name: name.clone() });
        }
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for k in 0..g.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            param.data[k] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// One training item: candidates, query, and its ground-truth assignment.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub candidates: CandidateSet,
    pub query: QueryGraph,
    pub gt: Assignment,
}

/// One optimizer step over a sampled batch; returns the mean batch loss.
///
/// All randomness (batch composition, dropout, spanning trees) is a pure
/// function of `(cfg.seed, step, slot)`, so trajectories are resumable.
pub fn train_step(
    p: &mut EnergyModelParams,
    adam: &mut AdamState,
    items: &[TrainItem],
    f: &FrequencySet,
    cfg: &TrainConfig,
    step: u64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(ModelError::BadConfig("no training items".to_string()));
    }
    let mut total = GradSet::zeros_like(p);
    let mut loss_sum = 0.0;
    for slot in 0..cfg.batch_size {
        let slot = slot as u64;
        let idx = (mix_seed(&[cfg.seed, 1, step, slot]) % items.len() as u64) as usize;
        let item = &items[idx];
        let q = category_dropout(
            &item.query,
            cfg.category_dropout_p,
            mix_seed(&[cfg.seed, 2, step, slot]),
        );
        let eval = grounding_loss(
            p,
            &item.candidates,
            &q,
            &item.gt,
            f,
            mix_seed(&[cfg.seed, 3, step, slot]),
        )?;
        loss_sum += eval.loss.item();
        total.accumulate(&param_gradients(&eval)?)?;
    }
    let inv = 1.0 / cfg.batch_size as f64;
    total.scale(inv);
    adam_step(p, &total, adam, cfg)?;
    Ok(loss_sum * inv)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Everything needed to resume training or run inference, as versioned JSON.
/// Round-trips are bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: EnergyModelParams,
    pub freq: FrequencySet,
    pub vocab: Vocabulary,
    pub train: TrainConfig,
    pub adam: AdamState,
    pub steps_done: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::CheckpointVersion {
                got: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(ckpt)
    }
}
