//! Synthetic tabletop-style worlds for training and evaluating grounding.
//!
//! A scene is a set of category-labeled boxes in the unit square; relations
//! between them are not sampled but *derived* from geometric predicates, so
//! any triple can be re-checked from the layout alone.  Detector-like
//! candidate sets jitter each true box and add spurious ones, and per-box
//! category features are deliberately noisy (the flip probability is a
//! config knob) while relations stay clean — models must use pairwise terms
//! to win, which is the phenomenon the evaluation metrics measure.
//!
//! Scene generation guarantees category ambiguity: every category that
//! appears in a scene appears at least `multiplicity` times, so unary
//! evidence alone cannot isolate a node's target.
//!
//! All generation is deterministic per `(config, seed)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bp::BpResult;
use crate::graph::{
    Assignment, BoxXYWH, CandidateSet, QueryEdge, QueryGraph, QueryNode, Vocabulary,
};

/// Relation names, in id order.
pub const RELATIONS: [&str; 6] = ["left_of", "above", "on", "inside", "near", "overlaps"];

pub const REL_LEFT_OF: usize = 0;
pub const REL_ABOVE: usize = 1;
pub const REL_ON: usize = 2;
pub const REL_INSIDE: usize = 3;
pub const REL_NEAR: usize = 4;
pub const REL_OVERLAPS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    BadConfig(String),
    #[error("could not place {placed} of {requested} objects after {tries} attempts")]
    PlacementFailed {
        placed: usize,
        requested: usize,
        tries: usize,
    },
    #[error("scene has no connected relation subgraph with {n_nodes} nodes and {n_edges} edges")]
    QueryUnavailable { n_nodes: usize, n_edges: usize },
    #[error("a connected {n_nodes}-node query needs at least {} edges, got {n_edges}", n_nodes - 1)]
    TooFewEdges { n_nodes: usize, n_edges: usize },
    #[error("k must be at least 1")]
    BadK,
    #[error("marginals cover {got} nodes but the query has {expected}")]
    NodeCountMismatch { got: usize, expected: usize },
}

type Result<T> = std::result::Result<T, WorldError>;

// ---------------------------------------------------------------------------
// Config and scene types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    pub n_categories: usize,
    /// Every category used in a scene appears at least this many times.
    pub multiplicity: usize,
    /// Relative candidate-box jitter magnitude.
    pub jitter: f64,
    /// Extra random candidate boxes per scene.
    pub n_spurious: usize,
    /// Probability that a candidate's category feature points at a wrong
    /// category.
    pub flip_noise: f64,
    pub size_min: f64,
    pub size_max: f64,
    /// Probability of deliberately nesting an object inside an earlier one.
    pub inside_prob: f64,
    /// Center-distance threshold for the `near` predicate.
    pub near_radius: f64,
    /// Vertical adjacency band for the `on` predicate.
    pub on_tolerance: f64,
    pub max_place_tries: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_objects_min: 4,
            n_objects_max: 7,
            n_categories: 6,
            multiplicity: 2,
            jitter: 0.15,
            n_spurious: 8,
            flip_noise: 0.3,
            size_min: 0.08,
            size_max: 0.22,
            inside_prob: 0.15,
            near_radius: 0.25,
            on_tolerance: 0.03,
            max_place_tries: 200,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_objects_min == 0 || self.n_objects_min > self.n_objects_max {
            problems.push("object count range must be nonempty and positive".to_string());
        }
        if self.n_categories == 0 {
            problems.push("need at least one category".to_string());
        }
        if self.multiplicity == 0 {
            problems.push("multiplicity must be at least 1".to_string());
        }
        if self.jitter < 0.0 || self.flip_noise < 0.0 || self.flip_noise > 1.0 {
            problems.push("jitter must be >= 0 and flip_noise in [0, 1]".to_string());
        }
        if !(self.size_min.is_finite() && self.size_max.is_finite())
            || self.size_min <= 0.0
            || self.size_min > self.size_max
            || self.size_max > 1.0
        {
            problems.push("sizes must satisfy 0 < size_min <= size_max <= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.inside_prob) {
            problems.push("inside_prob must lie in [0, 1]".to_string());
        }
        if self.near_radius < 0.0 || self.on_tolerance < 0.0 {
            problems.push("near_radius and on_tolerance must be >= 0".to_string());
        }
        if self.max_place_tries == 0 {
            problems.push("max_place_tries must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(WorldError::BadConfig(problems.join("; ")))
        }
    }

    /// Vocabulary induced by this config: `cat_0 .. cat_{n-1}` plus the
    /// fixed relation list.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(
            (0..self.n_categories).map(|i| format!("cat_{i}")).collect(),
            RELATIONS.iter().map(|r| r.to_string()).collect(),
        )
    }

    /// Length of the raw feature vector candidates carry: a category
    /// one-hot plus the box geometry.
    pub fn raw_feat_dim(&self) -> usize {
        self.n_categories + 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    pub bbox: BoxXYWH,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    /// Ordered triples `(j, k, relation_id)` over object indices; exactly
    /// the triples whose geometric predicate holds.
    pub relations: Vec<(usize, usize, usize)>,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

fn edges(b: &BoxXYWH) -> (f64, f64, f64, f64) {
    // (left, right, top, bottom); y grows downward.
    (
        b.cx - b.w / 2.0,
        b.cx + b.w / 2.0,
        b.cy - b.h / 2.0,
        b.cy + b.h / 2.0,
    )
}

pub fn iou(a: &BoxXYWH, b: &BoxXYWH) -> f64 {
    let (al, ar, at, ab) = edges(a);
    let (bl, br, bt, bb) = edges(b);
    let iw = (ar.min(br) - al.max(bl)).max(0.0);
    let ih = (ab.min(bb) - at.max(bt)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn intersection_area(a: &BoxXYWH, b: &BoxXYWH) -> f64 {
    let (al, ar, at, ab) = edges(a);
    let (bl, br, bt, bb) = edges(b);
    (ar.min(br) - al.max(bl)).max(0.0) * (ab.min(bb) - at.max(bt)).max(0.0)
}

pub fn rel_left_of(a: &BoxXYWH, b: &BoxXYWH) -> bool {
    let (_, ar, _, _) = edges(a);
    let (bl, _, _, _) = edges(b);
    ar < bl
}

/// `a` is above `b` (y grows downward, so a's bottom edge sits over b's top).
pub fn rel_above(a: &BoxXYWH, b: &BoxXYWH) -> bool {
    let (_, _, _, ab) = edges(a);
    let (_, _, bt, _) = edges(b);
    ab < bt
}

/// `a` rests on `b`: horizontal overlap plus vertical adjacency of a's
/// bottom to b's top within the tolerance band.
pub fn rel_on(a: &BoxXYWH, b: &BoxXYWH, tolerance: f64) -> bool {
    let (al, ar, _, ab) = edges(a);
    let (bl, br, bt, _) = edges(b);
    let overlap = ar.min(br) - al.max(bl);
    overlap > 0.0 && (ab - bt).abs() <= tolerance
}

/// `a` lies strictly within `b`.
pub fn rel_inside(a: &BoxXYWH, b: &BoxXYWH) -> bool {
    let (al, ar, at, ab) = edges(a);
    let (bl, br, bt, bb) = edges(b);
    al > bl && ar < br && at > bt && ab < bb
}

pub fn rel_near(a: &BoxXYWH, b: &BoxXYWH, radius: f64) -> bool {
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    (dx * dx + dy * dy).sqrt() <= radius
}

pub fn rel_overlaps(a: &BoxXYWH, b: &BoxXYWH) -> bool {
    intersection_area(a, b) > 0.0
}

/// All relation ids whose predicate holds for the ordered pair `(a, b)`.
pub fn relations_of(a: &BoxXYWH, b: &BoxXYWH, cfg: &WorldConfig) -> Vec<usize> {
    let mut out = Vec::new();
    if rel_left_of(a, b) {
        out.push(REL_LEFT_OF);
    }
    if rel_above(a, b) {
        out.push(REL_ABOVE);
    }
    if rel_on(a, b, cfg.on_tolerance) {
        out.push(REL_ON);
    }
    if rel_inside(a, b) {
        out.push(REL_INSIDE);
    }
    if rel_near(a, b, cfg.near_radius) {
        out.push(REL_NEAR);
    }
    if rel_overlaps(a, b) {
        out.push(REL_OVERLAPS);
    }
    out
}

/// Every ordered relation triple a layout induces.
pub fn derive_relations(objects: &[SceneObject], cfg: &WorldConfig) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for j in 0..objects.len() {
        for k in 0..objects.len() {
            if j == k {
                continue;
            }
            for r in relations_of(&objects[j].bbox, &objects[k].bbox, cfg) {
                out.push((j, k, r));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

fn random_box(rng: &mut ChaCha8Rng, cfg: &WorldConfig) -> BoxXYWH {
    let w = rng.gen_range(cfg.size_min..=cfg.size_max);
    let h = rng.gen_range(cfg.size_min..=cfg.size_max);
    BoxXYWH {
        cx: rng.gen_range(w / 2.0..=1.0 - w / 2.0),
        cy: rng.gen_range(h / 2.0..=1.0 - h / 2.0),
        w,
        h,
    }
}

/// Generate a scene: sample categories with the multiplicity guarantee,
/// place boxes (occasionally nesting one deliberately), and derive all
/// relation triples from the final layout.
pub fn generate_scene(cfg: &WorldConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.n_objects_min..=cfg.n_objects_max);

    // Pick distinct categories, then hand each one `multiplicity` slots;
    // leftovers re-use the chosen categories at random.
    let groups = (n / cfg.multiplicity).max(1).min(cfg.n_categories);
    let mut cat_pool: Vec<usize> = (0..cfg.n_categories).collect();
    cat_pool.shuffle(&mut rng);
    let chosen = &cat_pool[..groups];
    let mut categories = Vec::with_capacity(n);
    for &c in chosen {
        for _ in 0..cfg.multiplicity.min(n - categories.len()) {
            categories.push(c);
        }
    }
    while categories.len() < n {
        categories.push(chosen[rng.gen_range(0..chosen.len())]);
    }
    categories.shuffle(&mut rng);

    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for &category in &categories {
        // Occasionally nest inside a placed object that has room.
        let host = if !objects.is_empty() && rng.gen::<f64>() < cfg.inside_prob {
            let candidates: Vec<usize> = (0..objects.len())
                .filter(|&i| {
                    objects[i].bbox.w > 2.5 * cfg.size_min && objects[i].bbox.h > 2.5 * cfg.size_min
                })
                .collect();
            candidates.choose(&mut rng).copied()
        } else {
            None
        };
        if let Some(hi) = host {
            let hb = objects[hi].bbox;
            let w = rng.gen_range(cfg.size_min..=(hb.w * 0.6).max(cfg.size_min));
            let h = rng.gen_range(cfg.size_min..=(hb.h * 0.6).max(cfg.size_min));
            let bbox = BoxXYWH {
                cx: hb.cx + rng.gen_range(-0.5..0.5) * (hb.w - w).max(0.0) * 0.9,
                cy: hb.cy + rng.gen_range(-0.5..0.5) * (hb.h - h).max(0.0) * 0.9,
                w: w.min(hb.w * 0.9),
                h: h.min(hb.h * 0.9),
            };
            objects.push(SceneObject { category, bbox });
            continue;
        }
        let mut placed = false;
        for _ in 0..cfg.max_place_tries {
            let bbox = random_box(&mut rng, cfg);
            let contained = objects
                .iter()
                .any(|o| rel_inside(&bbox, &o.bbox) || rel_inside(&o.bbox, &bbox));
            if !contained {
                objects.push(SceneObject { category, bbox });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(WorldError::PlacementFailed {
                placed: objects.len(),
                requested: n,
                tries: cfg.max_place_tries,
            });
        }
    }

    let relations = derive_relations(&objects, cfg);
    Ok(Scene {
        objects,
        relations,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Queries
// ---------------------------------------------------------------------------

/// A query sampled from a scene, with the object index each node refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledQuery {
    pub query: QueryGraph,
    /// Per node (in node order): the scene object it grounds to.
    pub gt_objects: Vec<usize>,
}

/// Sample a connected `n_nodes`-object subset of the scene's relation graph
/// and `n_edges` true relation triples among them.  Without `allow_cycles`
/// the edge set must be exactly a spanning tree (`n_edges == n_nodes - 1`);
/// with it, extra triples beyond a spanning tree are added at random.
pub fn make_query(
    s: &Scene,
    n_nodes: usize,
    n_edges: usize,
    allow_cycles: bool,
    seed: u64,
) -> Result<SampledQuery> {
    if n_nodes == 0 {
        return Err(WorldError::QueryUnavailable { n_nodes, n_edges });
    }
    if n_nodes > 1 && n_edges < n_nodes - 1 {
        return Err(WorldError::TooFewEdges { n_nodes, n_edges });
    }
    if !allow_cycles && ((n_nodes == 1 && n_edges != 0) || (n_nodes > 1 && n_edges != n_nodes - 1))
    {
        return Err(WorldError::TooFewEdges { n_nodes, n_edges });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Undirected adjacency of the relation graph.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); s.objects.len()];
    for &(j, k, _) in &s.relations {
        adj[j].push(k);
        adj[k].push(j);
    }

    let starts: Vec<usize> = if n_nodes == 1 {
        (0..s.objects.len()).collect()
    } else {
        (0..s.objects.len())
            .filter(|&i| !adj[i].is_empty())
            .collect()
    };
    if starts.is_empty() {
        return Err(WorldError::QueryUnavailable { n_nodes, n_edges });
    }

    'attempt: for _ in 0..64 {
        let mut selected = vec![*starts.choose(&mut rng).expect("nonempty starts")];
        while selected.len() < n_nodes {
            let mut frontier: Vec<usize> = selected
                .iter()
                .flat_map(|&v| adj[v].iter().copied())
                .filter(|o| !selected.contains(o))
                .collect();
            frontier.sort_unstable();
            frontier.dedup();
            match frontier.choose(&mut rng) {
                Some(&next) => selected.push(next),
                None => continue 'attempt,
            }
        }
        selected.sort_unstable();

        // True triples inside the subset, as query edges over node ids.
        let node_of = |obj: usize| selected.iter().position(|&o| o == obj).unwrap() + 1;
        let induced: Vec<QueryEdge> = s
            .relations
            .iter()
            .filter(|(j, k, _)| selected.contains(j) && selected.contains(k))
            .map(|&(j, k, r)| QueryEdge {
                src: node_of(j),
                dst: node_of(k),
                relation: r,
            })
            .collect();
        let nodes: Vec<QueryNode> = selected
            .iter()
            .enumerate()
            .map(|(i, &obj)| QueryNode {
                id: i + 1,
                category: s.objects[obj].category,
                is_generic: false,
            })
            .collect();
        let full = QueryGraph {
            nodes,
            edges: induced,
        };
        if n_nodes > 1 && crate::spanning::connected_components(&full).len() != 1 {
            continue 'attempt;
        }
        let tree = if n_nodes == 1 {
            full.clone()
        } else {
            match crate::spanning::random_spanning_tree(&full, rng.gen()) {
                Ok(t) => t,
                Err(_) => continue 'attempt,
            }
        };
        let mut chosen = tree.edges.clone();
        let extra_needed = n_edges - chosen.len();
        if extra_needed > 0 {
            let pool: Vec<QueryEdge> = full
                .edges
                .iter()
                .filter(|e| !chosen.contains(e))
                .cloned()
                .collect();
            if pool.len() < extra_needed {
                continue 'attempt;
            }
            let mut extra: Vec<QueryEdge> = pool
                .choose_multiple(&mut rng, extra_needed)
                .cloned()
                .collect();
            chosen.append(&mut extra);
        }
        chosen.sort_by_key(|e| (e.src, e.dst, e.relation));
        return Ok(SampledQuery {
            query: QueryGraph {
                nodes: full.nodes,
                edges: chosen,
            },
            gt_objects: selected,
        });
    }
    Err(WorldError::QueryUnavailable { n_nodes, n_edges })
}

// ---------------------------------------------------------------------------
// Candidates
// ---------------------------------------------------------------------------

/// Minimum overlap a jittered candidate keeps with its source box.
const JITTER_IOU_FLOOR: f64 = 0.55;

fn one_hot(idx: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[idx] = 1.0;
    v
}

fn clamp_into_unit(mut b: BoxXYWH) -> BoxXYWH {
    b.w = b.w.min(1.0);
    b.h = b.h.min(1.0);
    b.cx = b.cx.clamp(b.w / 2.0, 1.0 - b.w / 2.0);
    b.cy = b.cy.clamp(b.h / 2.0, 1.0 - b.h / 2.0);
    b
}

/// Detector-style candidates: one jittered copy of every object's box (in
/// object order, so the returned map is the identity), then `n_spurious`
/// random boxes.  Features are a noisy category one-hot concatenated with
/// the box geometry.
pub fn candidate_boxes(s: &Scene, cfg: &WorldConfig, seed: u64) -> (CandidateSet, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes = Vec::new();
    let mut features = Vec::new();

    let noisy_category = |true_cat: usize, rng: &mut ChaCha8Rng| -> usize {
        if cfg.n_categories > 1 && rng.gen::<f64>() < cfg.flip_noise {
            // A wrong category, uniform over the others.
            let mut c = rng.gen_range(0..cfg.n_categories - 1);
            if c >= true_cat {
                c += 1;
            }
            c
        } else {
            true_cat
        }
    };

    for obj in &s.objects {
        let src = obj.bbox;
        let mut jittered = src;
        for _ in 0..50 {
            let proposal = clamp_into_unit(BoxXYWH {
                cx: src.cx + rng.gen_range(-cfg.jitter..=cfg.jitter) * src.w,
                cy: src.cy + rng.gen_range(-cfg.jitter..=cfg.jitter) * src.h,
                w: src.w * (1.0 + rng.gen_range(-cfg.jitter..=cfg.jitter)),
                h: src.h * (1.0 + rng.gen_range(-cfg.jitter..=cfg.jitter)),
            });
            if iou(&proposal, &src) >= JITTER_IOU_FLOOR {
                jittered = proposal;
                break;
            }
        }
        let cat = noisy_category(obj.category, &mut rng);
        let mut feat = one_hot(cat, cfg.n_categories);
        feat.extend_from_slice(&[jittered.cx, jittered.cy, jittered.w, jittered.h]);
        boxes.push(jittered);
        features.push(feat);
    }

    for _ in 0..cfg.n_spurious {
        let b = random_box(&mut rng, cfg);
        let cat = rng.gen_range(0..cfg.n_categories);
        let mut feat = one_hot(cat, cfg.n_categories);
        feat.extend_from_slice(&[b.cx, b.cy, b.w, b.h]);
        boxes.push(b);
        features.push(feat);
    }

    let gt_map = (0..s.objects.len()).collect();
    (CandidateSet { boxes, features }, gt_map)
}

// ---------------------------------------------------------------------------
// Items and metrics
// ---------------------------------------------------------------------------

/// One evaluation unit: a scene, its candidates, a query, and the node-to-
/// candidate ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingItem {
    pub scene: Scene,
    pub candidates: CandidateSet,
    pub query: QueryGraph,
    pub gt: Assignment,
}

/// Build a full item from one scene: sample a query, derive candidates, and
/// map ground-truth objects to candidate indices.
pub fn make_item(
    s: &Scene,
    cfg: &WorldConfig,
    n_nodes: usize,
    n_edges: usize,
    allow_cycles: bool,
    seed: u64,
) -> Result<GroundingItem> {
    let sq = make_query(
        s,
        n_nodes,
        n_edges,
        allow_cycles,
        crate::util::mix_seed(&[seed, 1]),
    )?;
    let (candidates, gt_map) = candidate_boxes(s, cfg, crate::util::mix_seed(&[seed, 2]));
    let gt = Assignment {
        boxes: sq.gt_objects.iter().map(|&o| gt_map[o]).collect(),
    };
    Ok(GroundingItem {
        scene: s.clone(),
        candidates,
        query: sq.query,
        gt,
    })
}

/// Candidate indices ordered by descending probability, ties to the lower
/// index.
pub fn ranked_by_prob(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });
    idx
}

/// Per-node top-`k` hits: a node scores iff one of its `k` most probable
/// candidates overlaps the designated ground-truth candidate's box with
/// IoU > 0.5.
pub fn node_hits_at_k(marginals: &BpResult, item: &GroundingItem, k: usize) -> Result<Vec<bool>> {
    if k < 1 {
        return Err(WorldError::BadK);
    }
    if marginals.marginals.len() != item.query.n_nodes() {
        return Err(WorldError::NodeCountMismatch {
            got: marginals.marginals.len(),
            expected: item.query.n_nodes(),
        });
    }
    let hits = marginals
        .marginals
        .iter()
        .zip(&item.gt.boxes)
        .map(|(m, &gt_idx)| {
            let gt_box = &item.candidates.boxes[gt_idx];
            ranked_by_prob(m.data())
                .iter()
                .take(k)
                .any(|&c| iou(&item.candidates.boxes[c], gt_box) > 0.5)
        })
        .collect();
    Ok(hits)
}

/// Like [`node_hits_at_k`] but for a single MAP assignment (k = 1 over the
/// decoded boxes).
pub fn node_hits_of_assignment(a: &Assignment, item: &GroundingItem) -> Result<Vec<bool>> {
    if a.boxes.len() != item.query.n_nodes() {
        return Err(WorldError::NodeCountMismatch {
            got: a.boxes.len(),
            expected: item.query.n_nodes(),
        });
    }
    Ok(a.boxes
        .iter()
        .zip(&item.gt.boxes)
        .map(|(&c, &gt_idx)| iou(&item.candidates.boxes[c], &item.candidates.boxes[gt_idx]) > 0.5)
        .collect())
}

/// Fraction of nodes hit.
pub fn recall_from_hits(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// Per-edge `(relation_id, hit)` pairs: an edge scores iff both endpoints
/// scored.
pub fn edge_hits(node_hits: &[bool], q: &QueryGraph) -> Vec<(usize, bool)> {
    q.edges
        .iter()
        .map(|e| {
            let sj = node_hits[q.node_index(e.src).expect("valid edge")];
            let sk = node_hits[q.node_index(e.dst).expect("valid edge")];
            (e.relation, sj && sk)
        })
        .collect()
}

/// Aggregate pair metrics for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecall {
    pub per_edge: Vec<(usize, bool)>,
    /// Hits over all edges.
    pub recall: f64,
    /// Mean of per-relation-category recalls (categories present only).
    pub mean_recall: f64,
}

pub fn pair_recall(node_hits: &[bool], q: &QueryGraph, n_relations: usize) -> PairRecall {
    let per_edge = edge_hits(node_hits, q);
    let total = per_edge.len();
    let hit_count = per_edge.iter().filter(|(_, h)| *h).count();
    let recall = if total == 0 {
        0.0
    } else {
        hit_count as f64 / total as f64
    };
    let mut per_rel_hits = vec![0usize; n_relations];
    let mut per_rel_total = vec![0usize; n_relations];
    for &(r, h) in &per_edge {
        per_rel_total[r] += 1;
        if h {
            per_rel_hits[r] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for r in 0..n_relations {
        if per_rel_total[r] > 0 {
            sum += per_rel_hits[r] as f64 / per_rel_total[r] as f64;
            present += 1;
        }
    }
    let mean_recall = if present == 0 {
        0.0
    } else {
        sum / present as f64
    };
    PairRecall {
        per_edge,
        recall,
        mean_recall,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::spanning;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BoxXYWH {
        BoxXYWH { cx, cy, w, h }
    }

    #[test]
    fn disjoint_horizontal_pair_is_left_of_only() {
        let cfg = WorldConfig::default();
        let a = b(0.2, 0.5, 0.1, 0.1);
        let c = b(0.8, 0.5, 0.1, 0.1);
        let fwd = relations_of(&a, &c, &cfg);
        assert_eq!(fwd, vec![REL_LEFT_OF]);
        let back = relations_of(&c, &a, &cfg);
        assert!(back.is_empty());
    }

    #[test]
    fn contained_box_yields_inside_triple() {
        let cfg = WorldConfig::default();
        let objects = vec![
            SceneObject {
                category: 0,
                bbox: b(0.5, 0.5, 0.1, 0.1),
            },
            SceneObject {
                category: 1,
                bbox: b(0.5, 0.5, 0.4, 0.4),
            },
        ];
        let rels = derive_relations(&objects, &cfg);
        assert!(rels.contains(&(0, 1, REL_INSIDE)));
        assert!(!rels.contains(&(1, 0, REL_INSIDE)));
        assert!(rels.contains(&(0, 1, REL_OVERLAPS)));
        assert!(rels.contains(&(1, 0, REL_OVERLAPS)));
    }

    #[test]
    fn stacked_boxes_are_on() {
        let cfg = WorldConfig::default();
        // Bottom of `a` touches top of `c` (exact binary fractions).
        let a = b(0.5, 0.375, 0.2, 0.25); // bottom = 0.5
        let c = b(0.5, 0.625, 0.4, 0.25); // top = 0.5
        assert!(rel_on(&a, &c, cfg.on_tolerance));
        assert!(!rel_above(&a, &c)); // touching, not strictly above
        assert!(!rel_on(&c, &a, cfg.on_tolerance));
    }

    #[test]
    fn scene_generation_is_deterministic_and_valid() {
        let cfg = WorldConfig::default();
        let s1 = generate_scene(&cfg, 42).unwrap();
        let s2 = generate_scene(&cfg, 42).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.objects.len() >= cfg.n_objects_min);
        assert!(s1.objects.len() <= cfg.n_objects_max);
        for o in &s1.objects {
            let (l, r, t, bo) = (
                o.bbox.cx - o.bbox.w / 2.0,
                o.bbox.cx + o.bbox.w / 2.0,
                o.bbox.cy - o.bbox.h / 2.0,
                o.bbox.cy + o.bbox.h / 2.0,
            );
            assert!(l >= -1e-12 && r <= 1.0 + 1e-12 && t >= -1e-12 && bo <= 1.0 + 1e-12);
        }
        // Independent re-check of every emitted triple, and of every
        // non-emitted one.
        let cfg2 = cfg.clone();
        for j in 0..s1.objects.len() {
            for k in 0..s1.objects.len() {
                if j == k {
                    continue;
                }
                let expect = relations_of(&s1.objects[j].bbox, &s1.objects[k].bbox, &cfg2);
                for r in 0..RELATIONS.len() {
                    let emitted = s1.relations.contains(&(j, k, r));
                    assert_eq!(emitted, expect.contains(&r), "triple ({j},{k},{r})");
                }
            }
        }
    }

    #[test]
    fn every_used_category_respects_multiplicity() {
        let cfg = WorldConfig::default();
        for seed in 0..30 {
            let s = generate_scene(&cfg, seed).unwrap();
            let mut counts = vec![0usize; cfg.n_categories];
            for o in &s.objects {
                counts[o.category] += 1;
            }
            for (cat, &c) in counts.iter().enumerate() {
                assert!(
                    c == 0 || c >= cfg.multiplicity,
                    "seed {seed}: category {cat} appears {c} < {}",
                    cfg.multiplicity
                );
            }
        }
    }

    #[test]
    fn iou_identities() {
        let a = b(0.5, 0.5, 0.2, 0.2);
        assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        let far = b(0.1, 0.1, 0.05, 0.05);
        assert_eq!(iou(&a, &far), 0.0);
        // Unit squares offset by half a width: intersection 0.5, union 1.5.
        let u1 = b(0.5, 0.5, 1.0, 1.0);
        let u2 = b(1.0, 0.5, 1.0, 1.0);
        assert!((iou(&u1, &u2) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn candidates_zero_noise_are_exact_copies() {
        let cfg = WorldConfig {
            jitter: 0.0,
            n_spurious: 0,
            flip_noise: 0.0,
            ..WorldConfig::default()
        };
        let s = generate_scene(&cfg, 3).unwrap();
        let (cands, gt_map) = candidate_boxes(&s, &cfg, 9);
        assert_eq!(cands.boxes.len(), s.objects.len());
        for (i, o) in s.objects.iter().enumerate() {
            assert_eq!(gt_map[i], i);
            assert_eq!(cands.boxes[i], o.bbox);
            let feat = &cands.features[i];
            assert_eq!(feat[o.category], 1.0);
            assert_eq!(
                feat[cfg.n_categories..],
                [o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h]
            );
        }
    }

    #[test]
    fn jittered_candidates_keep_iou_and_counts() {
        let cfg = WorldConfig {
            n_objects_min: 4,
            n_objects_max: 4,
            n_spurious: 8,
            ..WorldConfig::default()
        };
        for seed in 0..20 {
            let s = generate_scene(&cfg, seed).unwrap();
            let (cands, _) = candidate_boxes(&s, &cfg, seed * 7 + 1);
            assert_eq!(cands.boxes.len(), 12);
            for (i, o) in s.objects.iter().enumerate() {
                assert!(iou(&cands.boxes[i], &o.bbox) >= 0.5);
            }
        }
    }

    #[test]
    fn flip_noise_rate_is_honored() {
        let cfg = WorldConfig {
            flip_noise: 0.3,
            n_spurious: 0,
            ..WorldConfig::default()
        };
        let mut flipped = 0usize;
        let mut total = 0usize;
        for seed in 0..400 {
            let s = generate_scene(&cfg, seed).unwrap();
            let (cands, _) = candidate_boxes(&s, &cfg, seed + 10_000);
            for (i, o) in s.objects.iter().enumerate() {
                let feat_cat = cands.features[i]
                    .iter()
                    .take(cfg.n_categories)
                    .position(|&x| x == 1.0)
                    .unwrap();
                if feat_cat != o.category {
                    flipped += 1;
                }
                total += 1;
            }
        }
        let rate = flipped as f64 / total as f64;
        assert!((rate - 0.3).abs() < 0.02, "flip rate {rate}");
    }

    #[test]
    fn queries_are_trees_when_cycles_disallowed_and_edges_recheck() {
        let cfg = WorldConfig::default();
        let mut checked_edges = 0usize;
        for seed in 0..40u64 {
            let s = generate_scene(&cfg, seed).unwrap();
            let Ok(sq) = make_query(&s, 3, 2, false, seed * 3 + 1) else {
                continue;
            };
            assert!(spanning::is_tree(&sq.query));
            assert_eq!(sq.query.n_nodes(), 3);
            assert_eq!(sq.gt_objects.len(), 3);
            // Every query edge is a true triple of the underlying layout.
            for e in &sq.query.edges {
                let j = sq.gt_objects[e.src - 1];
                let k = sq.gt_objects[e.dst - 1];
                assert!(
                    relations_of(&s.objects[j].bbox, &s.objects[k].bbox, &cfg)
                        .contains(&e.relation),
                    "edge {e:?} fails geometric re-check"
                );
                checked_edges += 1;
            }
            // Node categories match the grounded objects.
            for (i, n) in sq.query.nodes.iter().enumerate() {
                assert_eq!(n.category, s.objects[sq.gt_objects[i]].category);
            }
            // Determinism.
            let again = make_query(&s, 3, 2, false, seed * 3 + 1).unwrap();
            assert_eq!(sq, again);
        }
        assert!(checked_edges > 20, "too few successful queries");
    }

    #[test]
    fn cyclic_queries_carry_extra_true_edges() {
        let cfg = WorldConfig::default();
        let mut found = false;
        for seed in 0..60u64 {
            let s = generate_scene(&cfg, seed).unwrap();
            if let Ok(sq) = make_query(&s, 3, 3, true, seed + 5) {
                assert_eq!(sq.query.edges.len(), 3);
                assert!(!spanning::is_tree(&sq.query));
                found = true;
                break;
            }
        }
        assert!(found, "no scene admitted a 3-node cyclic query");
    }

    #[test]
    fn bad_query_requests_error() {
        let cfg = WorldConfig::default();
        let s = generate_scene(&cfg, 1).unwrap();
        assert!(matches!(
            make_query(&s, 3, 1, true, 0),
            Err(WorldError::TooFewEdges { .. })
        ));
        assert!(matches!(
            make_query(&s, 3, 3, false, 0),
            Err(WorldError::TooFewEdges { .. })
        ));
        assert!(matches!(
            make_query(&s, 100, 99, false, 0),
            Err(WorldError::QueryUnavailable { .. })
        ));
    }

    fn item_with_certain_marginals(gt_mass: bool) -> (GroundingItem, BpResult) {
        let cfg = WorldConfig {
            jitter: 0.0,
            flip_noise: 0.0,
            n_spurious: 2,
            ..WorldConfig::default()
        };
        let s = generate_scene(&cfg, 12).unwrap();
        let item = make_item(&s, &cfg, 2, 1, false, 77).unwrap();
        let nb = item.candidates.boxes.len();
        let marginals = item
            .gt
            .boxes
            .iter()
            .map(|&g| {
                let mut p = vec![0.0; nb];
                if gt_mass {
                    p[g] = 1.0;
                } else {
                    // All mass on some candidate that is far from the target.
                    let wrong = (0..nb)
                        .find(|&c| iou(&item.candidates.boxes[c], &item.candidates.boxes[g]) <= 0.5)
                        .expect("a non-overlapping candidate exists");
                    p[wrong] = 1.0;
                }
                Tensor::from_vec(&[nb], p).unwrap()
            })
            .collect();
        let bp = BpResult {
            marginals,
            log_partition: Tensor::scalar(0.0),
            converged: true,
            iterations: 1,
        };
        (item, bp)
    }

    #[test]
    fn certain_marginals_give_perfect_recall() {
        let (item, bp) = item_with_certain_marginals(true);
        let h1 = node_hits_at_k(&bp, &item, 1).unwrap();
        assert!(h1.iter().all(|&h| h));
        assert_eq!(recall_from_hits(&h1), 1.0);
        let pr = pair_recall(&h1, &item.query, RELATIONS.len());
        assert_eq!(pr.recall, 1.0);
        assert_eq!(pr.mean_recall, 1.0);
    }

    #[test]
    fn wrong_marginals_miss_and_sink_pair_recall() {
        let (item, bp) = item_with_certain_marginals(false);
        let h1 = node_hits_at_k(&bp, &item, 1).unwrap();
        assert!(h1.iter().all(|&h| !h));
        let pr = pair_recall(&h1, &item.query, RELATIONS.len());
        assert_eq!(pr.recall, 0.0);
        // One endpoint right, one wrong: still a miss.
        let mixed = [true, false];
        let pr2 = pair_recall(&mixed, &item.query, RELATIONS.len());
        assert_eq!(pr2.recall, 0.0);
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let cfg = WorldConfig::default();
        let s = generate_scene(&cfg, 21).unwrap();
        let item = make_item(&s, &cfg, 3, 2, false, 5).unwrap();
        let nb = item.candidates.boxes.len();
        // Uniform-ish marginals with small deterministic perturbations.
        let marginals = (0..item.query.n_nodes())
            .map(|v| {
                let p: Vec<f64> = (0..nb)
                    .map(|c| 1.0 / nb as f64 + 1e-6 * ((v * 31 + c * 17) % 7) as f64)
                    .collect();
                let z: f64 = p.iter().sum();
                Tensor::from_vec(&[nb], p.into_iter().map(|x| x / z).collect()).unwrap()
            })
            .collect();
        let bp = BpResult {
            marginals,
            log_partition: Tensor::scalar(0.0),
            converged: true,
            iterations: 1,
        };
        let mut prev = 0.0;
        for k in 1..=nb {
            let r = recall_from_hits(&node_hits_at_k(&bp, &item, k).unwrap());
            assert!(r >= prev - 1e-12, "recall dropped at k={k}");
            prev = r;
        }
        assert_eq!(prev, 1.0, "recall@N_b must find the gt candidate");
        assert!(matches!(
            node_hits_at_k(&bp, &item, 0),
            Err(WorldError::BadK)
        ));
    }

    #[test]
    fn distractor_guarantee_holds_for_default_config() {
        let cfg = WorldConfig::default();
        for seed in 0..20u64 {
            let s = generate_scene(&cfg, seed).unwrap();
            let Ok(item) = make_item(&s, &cfg, 2, 1, false, seed) else {
                continue;
            };
            for (pos, node) in item.query.nodes.iter().enumerate() {
                let gt_obj = item.gt.boxes[pos];
                let same_cat = s
                    .objects
                    .iter()
                    .enumerate()
                    .filter(|(i, o)| *i != gt_obj && o.category == node.category)
                    .count();
                assert!(same_cat >= 1, "node {pos} has no category distractor");
            }
        }
    }
}
