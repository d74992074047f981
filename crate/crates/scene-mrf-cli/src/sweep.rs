//! `sweep-relations`: how grounding quality scales with query size.
//!
//! Two tables in one CSV.  `bucket` rows give node recall per relation
//! count, with empty buckets kept and marked rather than dropped.  `removal`
//! rows re-evaluate every item with k edges randomly deleted (seeded per
//! item, nodes kept), for k from 0 to the largest query; k = 0 reproduces
//! plain evaluation, and deleting every edge reproduces `eval --no-rels`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scene_mrf::util::mix_seed;
use scene_mrf::world::GroundingItem;

use crate::eval::{load_model, score_item, Agg};
use crate::train::load_dataset;
use crate::{runtime, CliError};

/// Delete `k` edges (or all of them, if fewer) uniformly at random, keeping
/// the survivors in their original order.
fn delete_edges(item: &GroundingItem, k: usize, seed: u64) -> scene_mrf::graph::QueryGraph {
    let mut q = item.query.clone();
    let e = q.edges.len();
    let drop = k.min(e);
    if drop == 0 {
        return q;
    }
    let mut order: Vec<usize> = (0..e).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut keep = vec![true; e];
    for &i in order.iter().take(drop) {
        keep[i] = false;
    }
    let mut it = keep.iter();
    q.edges.retain(|_| *it.next().unwrap());
    q
}

fn ratio(num: usize, den: usize) -> String {
    if den == 0 {
        "na".to_string()
    } else {
        format!("{:.6}", num as f64 / den as f64)
    }
}

fn csv_row(kind: &str, x: usize, a: &Agg) -> String {
    let mut row = format!(
        "{kind},{x},{},{},{},{}",
        a.n_items, a.nodes, a.node_hits[0], a.node_hits[1]
    );
    let _ = writeln!(
        row,
        ",{},{}",
        ratio(a.node_hits[0], a.nodes),
        ratio(a.node_hits[1], a.nodes)
    );
    row
}

pub const SWEEP_HEADER: &str =
    "kind,x,n_items,n_nodes,hits_at_1,hits_at_5,recall_at_1,recall_at_5\n";

pub fn run(data: &Path, checkpoint: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let ckpt = load_model(checkpoint)?;
    let (items, vocab) = load_dataset(data)?;
    if vocab != ckpt.vocab {
        return Err(CliError::Validation(format!(
            "vocabulary mismatch between {} and {}",
            data.display(),
            checkpoint.display()
        )));
    }

    // Recall per relation-count bucket, untransformed queries.
    let mut buckets: BTreeMap<usize, Agg> = BTreeMap::new();
    for item in &items {
        let score = score_item(&ckpt, item, &item.query, None)?;
        buckets.entry(score.n_edges).or_default().add(&score);
    }
    let min_edges = *buckets.keys().next().unwrap();
    let max_edges = *buckets.keys().last().unwrap();

    let mut csv = String::from(SWEEP_HEADER);
    for x in min_edges.min(1)..=max_edges {
        match buckets.get(&x) {
            Some(agg) => csv.push_str(&csv_row("bucket", x, agg)),
            None => csv.push_str(&csv_row("bucket", x, &Agg::default())),
        }
    }

    // Edge-removal curves: same items, k random deletions each.
    for k in 0..=max_edges {
        let mut agg = Agg::default();
        for (index, item) in items.iter().enumerate() {
            let q = delete_edges(item, k, mix_seed(&[seed, index as u64, k as u64]));
            agg.add(&score_item(&ckpt, item, &q, None)?);
        }
        csv.push_str(&csv_row("removal", k, &agg));
    }

    print!("{csv}");
    std::fs::write(out, csv).map_err(runtime)?;
    Ok(())
}
