//! `gen-data`: sample a synthetic grounding dataset.
//!
//! Each item is drawn independently from the master seed, so the output is
//! byte-reproducible and insensitive to how many retries other items needed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scene_mrf::dataset::{vocab_path_for, write_items, write_vocab};
use scene_mrf::util::mix_seed;
use scene_mrf::world::{generate_scene, make_item, GroundingItem, WorldConfig};

use crate::config::FlatConfig;
use crate::{runtime, validation, CliError};

/// Per-item rejection budget: a fresh scene is drawn for every attempt, so
/// failures are independent and this bound is effectively never hit with a
/// sane config.
const MAX_ITEM_ATTEMPTS: u64 = 200;

#[derive(Debug)]
pub struct GenConfig {
    pub world: WorldConfig,
    pub n_items: usize,
    pub query_nodes_min: usize,
    pub query_nodes_max: usize,
    /// 0 keeps every query a tree; k > 0 adds Uniform{0..=k} extra edges
    /// (cycles) per item.
    pub extra_edges_max: usize,
}

pub fn parse_gen_config(path: &Path) -> Result<GenConfig, CliError> {
    let mut f = FlatConfig::load(path)?;
    let d = WorldConfig::default();
    let world = WorldConfig {
        n_objects_min: f.take_or("n_objects_min", d.n_objects_min)?,
        n_objects_max: f.take_or("n_objects_max", d.n_objects_max)?,
        n_categories: f.take_or("n_categories", d.n_categories)?,
        multiplicity: f.take_or("multiplicity", d.multiplicity)?,
        jitter: f.take_or("jitter", d.jitter)?,
        n_spurious: f.take_or("n_spurious", d.n_spurious)?,
        flip_noise: f.take_or("flip_noise", d.flip_noise)?,
        size_min: f.take_or("size_min", d.size_min)?,
        size_max: f.take_or("size_max", d.size_max)?,
        inside_prob: f.take_or("inside_prob", d.inside_prob)?,
        near_radius: f.take_or("near_radius", d.near_radius)?,
        on_tolerance: f.take_or("on_tolerance", d.on_tolerance)?,
        max_place_tries: f.take_or("max_place_tries", d.max_place_tries)?,
    };
    let cfg = GenConfig {
        world,
        n_items: f.take_or("n_items", 100)?,
        query_nodes_min: f.take_or("query_nodes_min", 2)?,
        query_nodes_max: f.take_or("query_nodes_max", 4)?,
        extra_edges_max: f.take_or("extra_edges_max", 0)?,
    };
    f.finish()?;
    cfg.world.validate().map_err(validation)?;
    if cfg.n_items == 0 {
        return Err(CliError::Validation("n_items must be positive".into()));
    }
    if cfg.query_nodes_min == 0 || cfg.query_nodes_min > cfg.query_nodes_max {
        return Err(CliError::Validation(
            "need 1 <= query_nodes_min <= query_nodes_max".into(),
        ));
    }
    if cfg.query_nodes_max > cfg.world.n_objects_max {
        return Err(CliError::Validation(format!(
            "query_nodes_max {} exceeds n_objects_max {}",
            cfg.query_nodes_max, cfg.world.n_objects_max
        )));
    }
    Ok(cfg)
}

/// Draw one item; every attempt uses fresh sub-seeds of `(seed, index)`.
fn sample_item(cfg: &GenConfig, seed: u64, index: u64) -> Result<GroundingItem, CliError> {
    for attempt in 0..MAX_ITEM_ATTEMPTS {
        let scene = match generate_scene(&cfg.world, mix_seed(&[seed, index, attempt, 1])) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, index, attempt, 2]));
        let hi = cfg.query_nodes_max.min(scene.objects.len());
        if hi < cfg.query_nodes_min {
            continue;
        }
        let n_nodes = rng.gen_range(cfg.query_nodes_min..=hi);
        let extra = if cfg.extra_edges_max == 0 || n_nodes == 1 {
            0
        } else {
            rng.gen_range(0..=cfg.extra_edges_max)
        };
        let n_edges = if n_nodes == 1 { 0 } else { n_nodes - 1 + extra };
        let item = make_item(
            &scene,
            &cfg.world,
            n_nodes,
            n_edges,
            extra > 0,
            mix_seed(&[seed, index, attempt, 3]),
        );
        if let Ok(item) = item {
            return Ok(item);
        }
    }
    Err(CliError::Runtime(format!(
        "gave up sampling item {index} after {MAX_ITEM_ATTEMPTS} attempts; \
         the config leaves too few realizable queries"
    )))
}

pub fn run(config: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let cfg = parse_gen_config(config)?;
    let mut items = Vec::with_capacity(cfg.n_items);
    for index in 0..cfg.n_items as u64 {
        items.push(sample_item(&cfg, seed, index)?);
    }
    write_items(out, &items).map_err(runtime)?;
    let vocab_path = vocab_path_for(out);
    write_vocab(&vocab_path, &cfg.world.vocabulary()).map_err(runtime)?;

    let mut buckets: BTreeMap<usize, usize> = BTreeMap::new();
    for item in &items {
        *buckets.entry(item.query.edges.len()).or_insert(0) += 1;
    }
    println!(
        "wrote {} items to {} (vocabulary: {})",
        items.len(),
        out.display(),
        vocab_path.display()
    );
    println!("#relations,items");
    for (edges, count) in &buckets {
        println!("{edges},{count}");
    }
    println!("total,{}", items.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn cfg_file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn default_config_parses_and_samples() {
        let f = cfg_file("n_items = 3\n");
        let cfg = parse_gen_config(f.path()).unwrap();
        assert_eq!(cfg.n_items, 3);
        let item = sample_item(&cfg, 7, 0).unwrap();
        assert!(!item.query.nodes.is_empty());
        assert_eq!(item.gt.boxes.len(), item.query.nodes.len());
    }

    #[test]
    fn unknown_key_and_bad_shape_fail() {
        let f = cfg_file("n_itmes = 3\n");
        let err = parse_gen_config(f.path()).unwrap_err().to_string();
        assert!(err.contains("n_itmes"), "{err}");
        let f = cfg_file("query_nodes_min = 5\nquery_nodes_max = 2\n");
        assert!(parse_gen_config(f.path()).is_err());
    }

    #[test]
    fn cyclic_config_yields_some_cycles() {
        let f = cfg_file("n_items = 1\nextra_edges_max = 2\nquery_nodes_min = 3\n");
        let cfg = parse_gen_config(f.path()).unwrap();
        let mut saw_cycle = false;
        for index in 0..40 {
            let item = sample_item(&cfg, 11, index).unwrap();
            if item.query.edges.len() >= item.query.nodes.len() {
                saw_cycle = true;
            }
        }
        assert!(saw_cycle);
    }
}
