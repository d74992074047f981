//! `eval`: grounding metrics for a checkpoint on a dataset.
//!
//! Per item, marginals come from exact belief propagation on tree queries
//! and damped loopy propagation otherwise.  A node is a hit at k when one of
//! its top-k candidates overlaps the ground-truth box (IoU > 0.5); a pair is
//! a hit when both endpoints are.  Rows are bucketed by the item's relation
//! count; the report is CSV on stdout and, optionally, on disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use scene_mrf::bp::{infer_marginals, LoopyOptions};
use scene_mrf::graph::{build_scene_mrf, QueryGraph};
use scene_mrf::model::{forward_energies, Checkpoint};
use scene_mrf::spanning::is_tree;
use scene_mrf::world::{edge_hits, node_hits_at_k, GroundingItem};

use crate::train::load_dataset;
use crate::{runtime, validation, CliError};

/// Ranks at which metrics are reported; node recall uses the first two.
pub const K_LIST: [usize; 6] = [1, 5, 10, 20, 50, 100];

#[derive(Debug, Default, Clone, Copy)]
pub struct EvalFlags {
    pub no_rels: bool,
    pub mask_node: bool,
    pub loops_only: bool,
    pub trees_only: bool,
}

/// Per-item hit records, index-aligned with [`K_LIST`].
pub struct ItemScore {
    /// Relation count of the untransformed query: the bucketing key.
    pub n_edges: usize,
    /// Node hits at each k; only the masked node's hit under mask-node.
    pub hits: Vec<Vec<bool>>,
    /// Per-edge `(relation, both endpoints hit)` at each k; empty under
    /// mask-node, where pair metrics are undefined.
    pub pair_hits: Vec<Vec<(usize, bool)>>,
}

/// Ground `q_infer` (a possibly transformed copy of the item's query) and
/// score the result against the item's untransformed ground truth.
pub fn score_item(
    ckpt: &Checkpoint,
    item: &GroundingItem,
    q_infer: &QueryGraph,
    only_node: Option<usize>,
) -> Result<ItemScore, CliError> {
    let (u, e) = forward_energies(&ckpt.params, &item.candidates, &ckpt.freq).map_err(runtime)?;
    let m = build_scene_mrf(q_infer, &u, &e).map_err(runtime)?;
    let marginals = infer_marginals(&m, LoopyOptions::default()).map_err(runtime)?;
    let mut hits = Vec::with_capacity(K_LIST.len());
    let mut pair_hits = Vec::with_capacity(K_LIST.len());
    for &k in &K_LIST {
        let h = node_hits_at_k(&marginals, item, k).map_err(runtime)?;
        pair_hits.push(if only_node.is_some() {
            Vec::new()
        } else {
            edge_hits(&h, &item.query)
        });
        hits.push(match only_node {
            Some(m) => vec![h[m]],
            None => h,
        });
    }
    Ok(ItemScore {
        n_edges: item.query.edges.len(),
        hits,
        pair_hits,
    })
}

/// Metric accumulator for one bucket of items.
#[derive(Default, Clone)]
pub struct Agg {
    pub n_items: usize,
    pub nodes: usize,
    pub node_hits: [usize; 6],
    pub edges: usize,
    pub pair_hit: [usize; 6],
    per_rel: BTreeMap<usize, (usize, [usize; 6])>,
}

impl Agg {
    pub fn add(&mut self, s: &ItemScore) {
        self.n_items += 1;
        self.nodes += s.hits[0].len();
        self.edges += s.pair_hits[0].len();
        for ki in 0..K_LIST.len() {
            self.node_hits[ki] += s.hits[ki].iter().filter(|&&h| h).count();
            for &(rel, hit) in &s.pair_hits[ki] {
                let entry = self.per_rel.entry(rel).or_insert((0, [0; 6]));
                if ki == 0 {
                    entry.0 += 1;
                }
                if hit {
                    self.pair_hit[ki] += 1;
                    entry.1[ki] += 1;
                }
            }
        }
    }

    pub fn recall_at(&self, ki: usize) -> Option<f64> {
        (self.nodes > 0).then(|| self.node_hits[ki] as f64 / self.nodes as f64)
    }

    pub fn pair_recall_at(&self, ki: usize) -> Option<f64> {
        (self.edges > 0).then(|| self.pair_hit[ki] as f64 / self.edges as f64)
    }

    /// Mean over relation categories present of the per-relation pair recall.
    pub fn pair_mean_recall_at(&self, ki: usize) -> Option<f64> {
        if self.per_rel.is_empty() {
            return None;
        }
        let sum: f64 = self
            .per_rel
            .values()
            .map(|(n, hits)| hits[ki] as f64 / *n as f64)
            .sum();
        Some(sum / self.per_rel.len() as f64)
    }
}

fn ratio(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "na".to_string(),
    }
}

fn csv_row(label: &str, a: &Agg) -> String {
    let mut row = format!("{label},{},{},{}", a.n_items, a.nodes, a.edges);
    for ki in 0..2 {
        let _ = write!(row, ",{}", ratio(a.recall_at(ki)));
    }
    for ki in 0..K_LIST.len() {
        let _ = write!(row, ",{}", ratio(a.pair_recall_at(ki)));
    }
    for ki in 0..K_LIST.len() {
        let _ = write!(row, ",{}", ratio(a.pair_mean_recall_at(ki)));
    }
    row.push('\n');
    row
}

pub const EVAL_HEADER: &str = "bucket,n_items,n_nodes,n_edges,recall_at_1,recall_at_5,\
pair_r_at_1,pair_r_at_5,pair_r_at_10,pair_r_at_20,pair_r_at_50,pair_r_at_100,\
pair_mr_at_1,pair_mr_at_5,pair_mr_at_10,pair_mr_at_20,pair_mr_at_50,pair_mr_at_100\n";

pub fn load_model(checkpoint: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(checkpoint).map_err(validation)
}

/// Apply the eval transforms to one indexed item.  Returns the query to run
/// inference on and, under mask-node, the index of the node to score.
pub fn transform_query(
    item: &GroundingItem,
    index: usize,
    flags: EvalFlags,
) -> (QueryGraph, Option<usize>) {
    let mut q = item.query.clone();
    if flags.no_rels {
        q.edges.clear();
    }
    let only_node = flags.mask_node.then(|| index % q.nodes.len());
    if let Some(m) = only_node {
        q.nodes[m].is_generic = true;
    }
    (q, only_node)
}

pub fn run(
    data: &Path,
    checkpoint: &Path,
    out: Option<&Path>,
    flags: EvalFlags,
) -> Result<(), CliError> {
    if flags.loops_only && flags.trees_only {
        return Err(CliError::Validation(
            "--loops-only and --trees-only are mutually exclusive".into(),
        ));
    }
    let ckpt = load_model(checkpoint)?;
    let (items, vocab) = load_dataset(data)?;
    if vocab != ckpt.vocab {
        return Err(CliError::Validation(format!(
            "vocabulary mismatch between {} and {}",
            data.display(),
            checkpoint.display()
        )));
    }

    let mut buckets: BTreeMap<usize, Agg> = BTreeMap::new();
    let mut all = Agg::default();
    for (index, item) in items.iter().enumerate() {
        let tree = is_tree(&item.query);
        if (flags.loops_only && tree) || (flags.trees_only && !tree) {
            continue;
        }
        let (q_infer, only_node) = transform_query(item, index, flags);
        let score = score_item(&ckpt, item, &q_infer, only_node)?;
        buckets.entry(score.n_edges).or_default().add(&score);
        all.add(&score);
    }
    if all.n_items == 0 {
        return Err(CliError::Validation(
            "no items to evaluate after filtering".into(),
        ));
    }

    let mut csv = String::from(EVAL_HEADER);
    for (bucket, agg) in &buckets {
        csv.push_str(&csv_row(&bucket.to_string(), agg));
    }
    csv.push_str(&csv_row("all", &all));
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, csv).map_err(runtime)?;
    }
    Ok(())
}
