//! Query graphs, candidate sets, and the Scene-MRF.
//!
//! A query graph is a small labelled multigraph: nodes carry object
//! categories (or the generic wildcard) and directed edges carry relations.
//! Grounding a query against `n_boxes` candidate boxes is inference in a
//! pairwise MRF with one variable per query node, domain `0..n_boxes`:
//!
//! - each node contributes a unary energy vector `v(a_i)` (zero for generic
//!   nodes, so they are constrained only through their relations), and
//! - each edge `(j, k, r)` contributes a pairwise energy table
//!   `e(a_j, a_k)`, axis 0 indexed by the source node's box and axis 1 by
//!   the destination node's box.
//!
//! The joint distribution is `P(A) = exp(-sum v - sum e) / Z`.  Energies are
//! [`Tensor`]s so they can sit on a differentiation tape; inference code in
//! [`crate::bp`] then yields differentiable log-likelihoods.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, TensorError};

/// Reserved category name for wildcard nodes that match any object.
pub const GENERIC_CATEGORY: &str = "object";

/// Errors from graph validation, vocabulary resolution, or MRF assembly.
#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("invalid query graph:\n{}", issues.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n"))]
    InvalidQuery { issues: Vec<String> },
    #[error("unknown {kind} name {name:?}")]
    UnknownName { kind: &'static str, name: String },
    #[error("category index {index} out of range for {n_categories} categories")]
    CategoryOutOfRange { index: usize, n_categories: usize },
    #[error("relation index {index} out of range for {n_relations} relations")]
    RelationOutOfRange { index: usize, n_relations: usize },
    #[error("energy table shape {got:?} does not match expected {expected:?}")]
    TableShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("assignment covers {got} nodes, query has {expected}")]
    AssignmentLength { expected: usize, got: usize },
    #[error("assignment uses box {index}, but only {n_boxes} candidates exist")]
    BoxOutOfRange { index: usize, n_boxes: usize },
    #[error("candidate set is empty")]
    NoCandidates,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Object-category and relation name tables shared by datasets, queries and
/// checkpoints.  The generic wildcard name is reserved and never appears in
/// `objects`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub objects: Vec<String>,
    pub relations: Vec<String>,
}

impl Vocabulary {
    pub fn new(objects: Vec<String>, relations: Vec<String>) -> Self {
        assert!(
            !objects.iter().any(|o| o == GENERIC_CATEGORY),
            "the name {GENERIC_CATEGORY:?} is reserved for wildcard nodes"
        );
        Vocabulary { objects, relations }
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }
}

// ---------------------------------------------------------------------------
// Query graph
// ---------------------------------------------------------------------------

/// A query node.  `id`s are 1-based and contiguous; `category` indexes the
/// vocabulary and is ignored when `is_generic` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryNode {
    pub id: usize,
    pub category: usize,
    pub is_generic: bool,
}

/// A directed, relation-labelled edge between two node ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
}

/// A labelled multigraph of grounding constraints.
///
/// Parallel edges between the same node pair are allowed as long as they
/// carry different relations (or opposite directions); exact duplicate
/// triples are rejected by [`validate_query`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryGraph {
    pub nodes: Vec<QueryNode>,
    pub edges: Vec<QueryEdge>,
}

impl QueryGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Zero-based variable index for a node id.
    pub fn node_index(&self, id: usize) -> Option<usize> {
        if id >= 1 && id <= self.nodes.len() && self.nodes[id - 1].id == id {
            Some(id - 1)
        } else {
            self.nodes.iter().position(|n| n.id == id)
        }
    }
}

/// Check every structural invariant of a query graph, reporting *all*
/// violations rather than stopping at the first.
pub fn validate_query(q: &QueryGraph, vocab: &Vocabulary) -> Result<(), GraphError> {
    let mut issues = Vec::new();
    let n = q.nodes.len();
    if n == 0 {
        issues.push("query has no nodes".to_string());
    }
    let mut seen_ids = BTreeSet::new();
    for node in &q.nodes {
        if !seen_ids.insert(node.id) {
            issues.push(format!("duplicate node id {}", node.id));
        }
        if node.id < 1 || node.id > n {
            issues.push(format!("node id {} outside 1..={n}", node.id));
        }
        if !node.is_generic && node.category >= vocab.objects.len() {
            issues.push(format!(
                "node {} category index {} out of range ({} categories)",
                node.id,
                node.category,
                vocab.objects.len()
            ));
        }
    }
    let mut seen_edges = BTreeSet::new();
    for (i, e) in q.edges.iter().enumerate() {
        if !seen_ids.contains(&e.src) {
            issues.push(format!("edge {i} references missing node {}", e.src));
        }
        if !seen_ids.contains(&e.dst) {
            issues.push(format!("edge {i} references missing node {}", e.dst));
        }
        if e.src == e.dst {
            issues.push(format!("edge {i} is a self-loop on node {}", e.src));
        }
        if e.relation >= vocab.relations.len() {
            issues.push(format!(
                "edge {i} relation index {} out of range ({} relations)",
                e.relation,
                vocab.relations.len()
            ));
        }
        if !seen_edges.insert((e.src, e.dst, e.relation)) {
            issues.push(format!(
                "duplicate edge ({} -> {}, relation {})",
                e.src, e.dst, e.relation
            ));
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(GraphError::InvalidQuery { issues })
    }
}

// --- JSON wire format ------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WireNode {
    id: usize,
    category: String,
}

#[derive(Serialize, Deserialize)]
struct WireEdge {
    src: usize,
    dst: usize,
    rel: String,
}

#[derive(Serialize, Deserialize)]
struct WireQuery {
    nodes: Vec<WireNode>,
    edges: Vec<WireEdge>,
}

/// Serialize a query with names resolved through the vocabulary.
pub fn query_to_json(q: &QueryGraph, vocab: &Vocabulary) -> Result<String, GraphError> {
    let nodes =
        q.nodes
            .iter()
            .map(|n| {
                let category =
                    if n.is_generic {
                        Ok(GENERIC_CATEGORY.to_string())
                    } else {
                        vocab.objects.get(n.category).cloned().ok_or(
                            GraphError::CategoryOutOfRange {
                                index: n.category,
                                n_categories: vocab.objects.len(),
                            },
                        )
                    };
                category.map(|category| WireNode { id: n.id, category })
            })
            .collect::<Result<Vec<_>, _>>()?;
    let edges = q
        .edges
        .iter()
        .map(|e| {
            vocab
                .relations
                .get(e.relation)
                .cloned()
                .ok_or(GraphError::RelationOutOfRange {
                    index: e.relation,
                    n_relations: vocab.relations.len(),
                })
                .map(|rel| WireEdge {
                    src: e.src,
                    dst: e.dst,
                    rel,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(serde_json::to_string(&WireQuery { nodes, edges }).expect("query serialization"))
}

/// Parse a query from JSON, resolving names against the vocabulary and
/// validating the result.
pub fn query_from_json(json: &str, vocab: &Vocabulary) -> Result<QueryGraph, GraphError> {
    let wire: WireQuery = serde_json::from_str(json).map_err(|e| GraphError::InvalidQuery {
        issues: vec![format!("malformed query JSON: {e}")],
    })?;
    let nodes = wire
        .nodes
        .into_iter()
        .map(|n| {
            if n.category == GENERIC_CATEGORY {
                Ok(QueryNode {
                    id: n.id,
                    category: 0,
                    is_generic: true,
                })
            } else {
                vocab
                    .object_index(&n.category)
                    .map(|category| QueryNode {
                        id: n.id,
                        category,
                        is_generic: false,
                    })
                    .ok_or(GraphError::UnknownName {
                        kind: "object",
                        name: n.category,
                    })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let edges = wire
        .edges
        .into_iter()
        .map(|e| {
            vocab
                .relation_index(&e.rel)
                .map(|relation| QueryEdge {
                    src: e.src,
                    dst: e.dst,
                    relation,
                })
                .ok_or(GraphError::UnknownName {
                    kind: "relation",
                    name: e.rel,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let q = QueryGraph { nodes, edges };
    validate_query(&q, vocab)?;
    Ok(q)
}

// ---------------------------------------------------------------------------
// Candidates and assignments
// ---------------------------------------------------------------------------

/// An axis-aligned box as (center_x, center_y, width, height), normalized
/// image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// The candidate pool: one box plus one raw feature vector per candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub boxes: Vec<BoxXYWH>,
    /// Row-major `n_boxes x feature_dim`.
    pub features: Vec<Vec<f64>>,
}

impl CandidateSet {
    pub fn n_boxes(&self) -> usize {
        self.boxes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.len())
    }
}

/// A complete assignment of query nodes to candidate boxes, indexed by the
/// node's zero-based variable index (node id minus one).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub boxes: Vec<usize>,
}

impl Assignment {
    pub fn is_distinct(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.boxes.iter().all(|b| seen.insert(*b))
    }
}

// ---------------------------------------------------------------------------
// Scene-MRF
// ---------------------------------------------------------------------------

/// A pairwise energy table attached to the variables of two query nodes.
#[derive(Debug, Clone)]
pub struct PairFactor {
    /// Variable index of the edge's source node (axis 0 of `table`).
    pub j: usize,
    /// Variable index of the edge's destination node (axis 1 of `table`).
    pub k: usize,
    /// `n_boxes x n_boxes` energies.
    pub table: Tensor,
}

/// A pairwise MRF over box assignments for one query.
///
/// All variables share the domain `0..n_boxes`.  `unary[i]` is `None` when
/// the variable has no unary factor at all (used by hand-assembled test
/// graphs); [`build_scene_mrf`] always materializes a factor, zero-valued
/// for generic nodes.
#[derive(Debug, Clone)]
pub struct SceneMrf {
    pub n_vars: usize,
    pub n_boxes: usize,
    pub unary: Vec<Option<Tensor>>,
    pub pairwise: Vec<PairFactor>,
}

impl SceneMrf {
    /// Assemble a Scene-MRF from explicit factor tensors, checking shapes.
    pub fn from_factors(
        n_vars: usize,
        n_boxes: usize,
        unary: Vec<Option<Tensor>>,
        pairwise: Vec<PairFactor>,
    ) -> Result<Self, GraphError> {
        if unary.len() != n_vars {
            return Err(GraphError::AssignmentLength {
                expected: n_vars,
                got: unary.len(),
            });
        }
        for u in unary.iter().flatten() {
            if u.shape() != [n_boxes] {
                return Err(GraphError::TableShape {
                    expected: vec![n_boxes],
                    got: u.shape().to_vec(),
                });
            }
        }
        for p in &pairwise {
            if p.table.shape() != [n_boxes, n_boxes] {
                return Err(GraphError::TableShape {
                    expected: vec![n_boxes, n_boxes],
                    got: p.table.shape().to_vec(),
                });
            }
            assert!(p.j < n_vars && p.k < n_vars, "factor endpoints in range");
        }
        Ok(SceneMrf {
            n_vars,
            n_boxes,
            unary,
            pairwise,
        })
    }

    /// Number of joint assignments, `n_boxes ^ n_vars`, saturating.
    pub fn state_space(&self) -> u128 {
        let mut total: u128 = 1;
        for _ in 0..self.n_vars {
            total = total.saturating_mul(self.n_boxes as u128);
        }
        total
    }

    /// Undirected adjacency between variables induced by pairwise factors.
    pub fn var_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_vars];
        for p in &self.pairwise {
            adj[p.j].push(p.k);
            adj[p.k].push(p.j);
        }
        adj
    }

    /// Connected components over variables (sorted, deterministic), plus for
    /// each component the sub-MRF with variables renumbered in sorted order.
    pub fn components(&self) -> Vec<(Vec<usize>, SceneMrf)> {
        let adj = self.var_adjacency();
        let mut comp_of = vec![usize::MAX; self.n_vars];
        let mut comps: Vec<Vec<usize>> = Vec::new();
        for start in 0..self.n_vars {
            if comp_of[start] != usize::MAX {
                continue;
            }
            let cid = comps.len();
            let mut stack = vec![start];
            let mut members = Vec::new();
            comp_of[start] = cid;
            while let Some(v) = stack.pop() {
                members.push(v);
                for &w in &adj[v] {
                    if comp_of[w] == usize::MAX {
                        comp_of[w] = cid;
                        stack.push(w);
                    }
                }
            }
            members.sort_unstable();
            comps.push(members);
        }
        comps
            .into_iter()
            .map(|members| {
                let local: BTreeMap<usize, usize> =
                    members.iter().enumerate().map(|(i, &v)| (v, i)).collect();
                let unary = members.iter().map(|&v| self.unary[v].clone()).collect();
                let pairwise = self
                    .pairwise
                    .iter()
                    .filter(|p| local.contains_key(&p.j))
                    .map(|p| PairFactor {
                        j: local[&p.j],
                        k: local[&p.k],
                        table: p.table.clone(),
                    })
                    .collect();
                let sub = SceneMrf {
                    n_vars: members.len(),
                    n_boxes: self.n_boxes,
                    unary,
                    pairwise,
                };
                (members, sub)
            })
            .collect()
    }

    /// True when the pairwise factors form a single spanning tree over the
    /// variables (connected, exactly `n_vars - 1` factors; parallel factors
    /// therefore disqualify).
    pub fn is_tree(&self) -> bool {
        if self.pairwise.len() != self.n_vars.saturating_sub(1) {
            return false;
        }
        self.components().len() == 1
    }
}

/// Build the grounding MRF for a query.
///
/// `unary_energies` is `n_boxes x n_categories` (energy of assigning box `b`
/// to category `o`); `pairwise_energies` is `n_boxes x n_boxes x n_relations`
/// (energy of the ordered box pair `(b, b')` under relation `r`).  Both may
/// live on a differentiation tape; the factor tensors are then differentiable
/// views, so losses computed from this MRF backpropagate into the energy
/// networks.  Generic nodes receive an all-zero unary factor.
pub fn build_scene_mrf(
    q: &QueryGraph,
    unary_energies: &Tensor,
    pairwise_energies: &Tensor,
) -> Result<SceneMrf, GraphError> {
    if unary_energies.shape().len() != 2 {
        return Err(GraphError::TableShape {
            expected: vec![0, 0],
            got: unary_energies.shape().to_vec(),
        });
    }
    let n_boxes = unary_energies.shape()[0];
    let n_categories = unary_energies.shape()[1];
    if n_boxes == 0 {
        return Err(GraphError::NoCandidates);
    }
    if pairwise_energies.shape().len() != 3
        || pairwise_energies.shape()[0] != n_boxes
        || pairwise_energies.shape()[1] != n_boxes
    {
        return Err(GraphError::TableShape {
            expected: vec![n_boxes, n_boxes, 0],
            got: pairwise_energies.shape().to_vec(),
        });
    }
    let n_relations = pairwise_energies.shape()[2];

    let mut unary = Vec::with_capacity(q.nodes.len());
    for node in &q.nodes {
        if node.is_generic {
            unary.push(Some(Tensor::zeros(&[n_boxes])));
        } else {
            if node.category >= n_categories {
                return Err(GraphError::CategoryOutOfRange {
                    index: node.category,
                    n_categories,
                });
            }
            // Column `category` of the unary table.
            let col = unary_energies
                .gather(1, &[node.category])?
                .reshape(&[n_boxes])?;
            unary.push(Some(col));
        }
    }

    let mut pairwise = Vec::with_capacity(q.edges.len());
    for e in &q.edges {
        if e.relation >= n_relations {
            return Err(GraphError::RelationOutOfRange {
                index: e.relation,
                n_relations,
            });
        }
        let j = q.node_index(e.src).ok_or(GraphError::InvalidQuery {
            issues: vec![format!("edge references missing node {}", e.src)],
        })?;
        let k = q.node_index(e.dst).ok_or(GraphError::InvalidQuery {
            issues: vec![format!("edge references missing node {}", e.dst)],
        })?;
        let table = pairwise_energies
            .gather(2, &[e.relation])?
            .reshape(&[n_boxes, n_boxes])?;
        pairwise.push(PairFactor { j, k, table });
    }

    Ok(SceneMrf {
        n_vars: q.nodes.len(),
        n_boxes,
        unary,
        pairwise,
    })
}

/// Total energy `sum_i v_i(a_i) + sum_e e(a_j, a_k)` of a complete
/// assignment (plain `f64`, no tape).
pub fn energy_of_assignment(m: &SceneMrf, a: &Assignment) -> Result<f64, GraphError> {
    if a.boxes.len() != m.n_vars {
        return Err(GraphError::AssignmentLength {
            expected: m.n_vars,
            got: a.boxes.len(),
        });
    }
    for &b in &a.boxes {
        if b >= m.n_boxes {
            return Err(GraphError::BoxOutOfRange {
                index: b,
                n_boxes: m.n_boxes,
            });
        }
    }
    let mut total = 0.0;
    for (i, u) in m.unary.iter().enumerate() {
        if let Some(u) = u {
            total += u.data()[a.boxes[i]];
        }
    }
    for p in &m.pairwise {
        total += p.table.data()[a.boxes[p.j] * m.n_boxes + a.boxes[p.k]];
    }
    Ok(total)
}
