//! Random spanning trees of query graphs.
//!
//! Training computes exact likelihoods with tree belief propagation, so each
//! (possibly cyclic) query is relaxed to a spanning tree.  Re-sampling the
//! tree per training step (seeded, deterministic) lets every edge contribute
//! over the course of training instead of freezing one arbitrary relaxation.
//!
//! The sampler draws an i.i.d. `Uniform(0,1)` weight per edge and runs
//! Kruskal with a union-find (path compression + union by rank).  With
//! continuous weights all spanning trees of symmetric structures are hit
//! with equal probability; e.g. each of a triangle's three trees appears
//! 1/3 of the time.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{QueryEdge, QueryGraph};

#[derive(Debug, thiserror::Error)]
pub enum SpanningError {
    #[error("graph is disconnected ({components} components); take a spanning tree per component")]
    Disconnected { components: usize },
    #[error("graph has no nodes")]
    Empty,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        // Path compression.
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Connected components of the undirected node graph, each a sorted list of
/// node ids; components ordered by smallest member.
pub fn connected_components(q: &QueryGraph) -> Vec<Vec<usize>> {
    let n = q.nodes.len();
    let mut uf = UnionFind::new(n);
    for e in &q.edges {
        if let (Some(a), Some(b)) = (q.node_index(e.src), q.node_index(e.dst)) {
            uf.union(a, b);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let root = uf.find(i);
        groups.entry(root).or_default().push(q.nodes[i].id);
    }
    let mut comps: Vec<Vec<usize>> = groups.into_values().collect();
    for c in &mut comps {
        c.sort_unstable();
    }
    comps.sort_by_key(|c| c[0]);
    comps
}

/// True iff the edge multiset forms a single spanning tree: connected with
/// exactly `n - 1` edges.  Parallel edges count toward the total, so a pair
/// of nodes joined twice is *not* a tree.
pub fn is_tree(q: &QueryGraph) -> bool {
    let n = q.nodes.len();
    if n == 0 {
        return false;
    }
    q.edges.len() == n - 1 && connected_components(q).len() == 1
}

/// Sample a uniformly weighted random spanning tree of a connected query.
///
/// The result keeps the original node list and a subset of `n - 1` edges
/// (original labels and orientations, original relative order).  The same
/// seed always yields the same tree.
pub fn random_spanning_tree(q: &QueryGraph, seed: u64) -> Result<QueryGraph, SpanningError> {
    let n = q.nodes.len();
    if n == 0 {
        return Err(SpanningError::Empty);
    }
    let comps = connected_components(q);
    if comps.len() != 1 {
        return Err(SpanningError::Disconnected {
            components: comps.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<(f64, usize)> = q
        .edges
        .iter()
        .enumerate()
        .map(|(i, _)| (rng.gen::<f64>(), i))
        .collect();
    // Weight ties are measure-zero but break on edge index for determinism.
    order.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));

    let mut uf = UnionFind::new(n);
    let mut chosen: Vec<usize> = Vec::with_capacity(n - 1);
    for (_, idx) in order {
        let e = &q.edges[idx];
        let a = q.node_index(e.src).expect("validated edge");
        let b = q.node_index(e.dst).expect("validated edge");
        if uf.union(a, b) {
            chosen.push(idx);
            if chosen.len() == n - 1 {
                break;
            }
        }
    }
    chosen.sort_unstable();
    let edges: Vec<QueryEdge> = chosen.into_iter().map(|i| q.edges[i].clone()).collect();
    Ok(QueryGraph {
        nodes: q.nodes.clone(),
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::QueryNode;

    fn graph(n: usize, edges: &[(usize, usize)]) -> QueryGraph {
        QueryGraph {
            nodes: (1..=n)
                .map(|id| QueryNode {
                    id,
                    category: 0,
                    is_generic: false,
                })
                .collect(),
            edges: edges
                .iter()
                .map(|&(src, dst)| QueryEdge {
                    src,
                    dst,
                    relation: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn tree_inputs_come_back_unchanged() {
        let q = graph(4, &[(1, 2), (2, 3), (2, 4)]);
        assert!(is_tree(&q));
        let t = random_spanning_tree(&q, 7).unwrap();
        assert_eq!(t.edges, q.edges);
    }

    #[test]
    fn triangle_trees_are_roughly_uniform() {
        let q = graph(3, &[(1, 2), (2, 3), (3, 1)]);
        let mut counts = [0usize; 3];
        let trials = 3000;
        for seed in 0..trials {
            let t = random_spanning_tree(&q, seed).unwrap();
            assert!(is_tree(&t));
            // Identify the excluded edge.
            for (i, e) in q.edges.iter().enumerate() {
                if !t.edges.contains(e) {
                    counts[i] += 1;
                }
            }
        }
        for &c in &counts {
            let f = c as f64 / trials as f64;
            assert!(
                (f - 1.0 / 3.0).abs() < 0.05,
                "frequency {f} too far from 1/3"
            );
        }
    }

    #[test]
    fn same_seed_same_tree() {
        let q = graph(5, &[(1, 2), (2, 3), (3, 4), (4, 5), (5, 1), (2, 4)]);
        let a = random_spanning_tree(&q, 42).unwrap();
        let b = random_spanning_tree(&q, 42).unwrap();
        assert_eq!(a.edges, b.edges);
        // Different seeds eventually differ.
        let mut saw_different = false;
        for seed in 0..20 {
            if random_spanning_tree(&q, seed).unwrap().edges != a.edges {
                saw_different = true;
                break;
            }
        }
        assert!(saw_different);
    }

    #[test]
    fn disconnected_input_is_an_error() {
        let q = graph(4, &[(1, 2), (3, 4)]);
        assert!(matches!(
            random_spanning_tree(&q, 0),
            Err(SpanningError::Disconnected { components: 2 })
        ));
        assert_eq!(connected_components(&q), vec![vec![1, 2], vec![3, 4]]);
    }

    #[test]
    fn parallel_edges_are_not_a_tree() {
        let mut q = graph(2, &[(1, 2)]);
        assert!(is_tree(&q));
        q.edges.push(QueryEdge {
            src: 2,
            dst: 1,
            relation: 0,
        });
        assert!(!is_tree(&q));
        // But a spanning tree can still be extracted.
        let t = random_spanning_tree(&q, 3).unwrap();
        assert!(is_tree(&t));
    }

    #[test]
    fn single_node_is_a_tree() {
        let q = graph(1, &[]);
        assert!(is_tree(&q));
        let t = random_spanning_tree(&q, 0).unwrap();
        assert!(t.edges.is_empty());
    }
}
