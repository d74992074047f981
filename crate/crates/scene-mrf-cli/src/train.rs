//! `train`: fit the energy model to a generated dataset.
//!
//! The whole trajectory is a pure function of the dataset, the config, and
//! `--seed`: checkpoints and loss logs are byte-identical across reruns, and
//! resuming from a checkpoint continues exactly where an unbroken run would
//! have been.

use std::io::Write;
use std::path::{Path, PathBuf};

use scene_mrf::dataset::{read_items, read_vocab, vocab_path_for};
use scene_mrf::graph::Vocabulary;
use scene_mrf::model::{
    grounding_loss, train_step, AdamState, Checkpoint, EnergyModelParams, ModelDims, TrainConfig,
    TrainItem, CHECKPOINT_VERSION,
};
use scene_mrf::posenc::{make_frequency_set, FrequencySet};
use scene_mrf::util::mix_seed;
use scene_mrf::world::GroundingItem;

use crate::config::FlatConfig;
use crate::{runtime, validation, CliError};

/// Training config plus the model-shape knobs that live in the same file.
pub struct TrainFileConfig {
    pub train: TrainConfig,
    pub freq_theta_max: u32,
    pub freq_theta_low: u32,
    pub freq_total: usize,
    pub max_pairwise_boxes: usize,
}

pub fn parse_train_config(path: &Path, seed: u64) -> Result<TrainFileConfig, CliError> {
    let mut f = FlatConfig::load(path)?;
    let d = TrainConfig::default();
    let train = TrainConfig {
        learning_rate: f.take_or("learning_rate", d.learning_rate)?,
        beta1: f.take_or("beta1", d.beta1)?,
        beta2: f.take_or("beta2", d.beta2)?,
        epsilon: f.take_or("epsilon", d.epsilon)?,
        batch_size: f.take_or("batch_size", d.batch_size)?,
        steps: f.take_or("steps", d.steps)?,
        category_dropout_p: f.take_or("category_dropout_p", d.category_dropout_p)?,
        seed,
        hidden: f.take_or("hidden", d.hidden)?,
    };
    let cfg = TrainFileConfig {
        train,
        freq_theta_max: f.take_or("freq_theta_max", 8)?,
        freq_theta_low: f.take_or("freq_theta_low", 3)?,
        freq_total: f.take_or("freq_total", 40)?,
        max_pairwise_boxes: f.take_or("max_pairwise_boxes", 64)?,
    };
    f.finish()?;
    cfg.train.validate().map_err(validation)?;
    Ok(cfg)
}

pub fn load_dataset(data: &Path) -> Result<(Vec<GroundingItem>, Vocabulary), CliError> {
    let items = read_items(data).map_err(validation)?;
    if items.is_empty() {
        return Err(CliError::Validation(format!(
            "dataset {} is empty",
            data.display()
        )));
    }
    let vocab = read_vocab(&vocab_path_for(data)).map_err(validation)?;
    Ok((items, vocab))
}

/// Everything but `steps` (and the trajectory position) must match to resume.
fn configs_compatible(a: &TrainConfig, b: &TrainConfig) -> bool {
    let mut a = a.clone();
    let mut b = b.clone();
    a.steps = 0;
    b.steps = 0;
    a == b
}

/// Keep the items the trainer can actually consume, reporting how many were
/// dropped and why feasibility failed for the first offender.
fn feasible_items(
    items: &[GroundingItem],
    params: &EnergyModelParams,
    freq: &FrequencySet,
) -> (Vec<TrainItem>, usize) {
    let mut kept = Vec::new();
    let mut skipped = 0;
    for item in items {
        let ok = item.candidates.feature_dim() == params.dims.raw_feat
            && item.candidates.n_boxes() <= params.dims.max_pairwise_boxes
            && grounding_loss(params, &item.candidates, &item.query, &item.gt, freq, 0).is_ok();
        if ok {
            kept.push(TrainItem {
                candidates: item.candidates.clone(),
                query: item.query.clone(),
                gt: item.gt.clone(),
            });
        } else {
            skipped += 1;
        }
    }
    (kept, skipped)
}

pub fn run(
    data: &Path,
    config: &Path,
    out: &Path,
    seed: u64,
    resume: Option<&Path>,
    loss_log: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = parse_train_config(config, seed)?;
    let (items, vocab) = load_dataset(data)?;
    let feat_dim = items[0].candidates.feature_dim();

    let (mut params, mut adam, freq, start) = match resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path).map_err(validation)?;
            if ckpt.vocab != vocab {
                return Err(CliError::Validation(format!(
                    "vocabulary mismatch between {} and {}",
                    data.display(),
                    ckpt_path.display()
                )));
            }
            if !configs_compatible(&ckpt.train, &cfg.train) {
                return Err(CliError::Validation(
                    "resume config differs from the checkpoint's (only `steps` may change)".into(),
                ));
            }
            if (cfg.train.steps as u64) < ckpt.steps_done {
                return Err(CliError::Validation(format!(
                    "checkpoint already has {} steps, config asks for {}",
                    ckpt.steps_done, cfg.train.steps
                )));
            }
            (ckpt.params, ckpt.adam, ckpt.freq, ckpt.steps_done)
        }
        None => {
            let freq = make_frequency_set(
                cfg.freq_theta_max,
                cfg.freq_theta_low,
                cfg.freq_total,
                mix_seed(&[seed, 0xF5E9]),
            )
            .map_err(validation)?;
            let dims = ModelDims {
                raw_feat: feat_dim,
                n_freq_pairs: freq.len(),
                hidden: cfg.train.hidden,
                n_objects: vocab.objects.len(),
                n_relations: vocab.relations.len(),
                max_pairwise_boxes: cfg.max_pairwise_boxes,
            };
            let params = EnergyModelParams::random(dims, mix_seed(&[seed, 0xA11]));
            let adam = AdamState::new(&params);
            (params, adam, freq, 0)
        }
    };

    let (train_items, skipped) = feasible_items(&items, &params, &freq);
    println!(
        "training on {} of {} items ({} infeasible skipped)",
        train_items.len(),
        items.len(),
        skipped
    );
    if train_items.is_empty() {
        return Err(CliError::Validation("no feasible training items".into()));
    }

    let mut loss_rows = String::from("step,loss\n");
    let mut last_loss = f64::NAN;
    for step in start..cfg.train.steps as u64 {
        let loss = train_step(
            &mut params,
            &mut adam,
            &train_items,
            &freq,
            &cfg.train,
            step,
        )
        .map_err(runtime)?;
        loss_rows.push_str(&format!("{},{}\n", step + 1, loss));
        last_loss = loss;
    }

    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        params,
        freq,
        vocab,
        train: cfg.train.clone(),
        adam,
        steps_done: cfg.train.steps as u64,
    };
    ckpt.save(out).map_err(runtime)?;

    let loss_path: PathBuf = match loss_log {
        Some(p) => p.to_path_buf(),
        None => out.with_extension("loss.csv"),
    };
    let mut f = std::fs::File::create(&loss_path).map_err(runtime)?;
    f.write_all(loss_rows.as_bytes()).map_err(runtime)?;

    let ran = cfg.train.steps as u64 - start;
    if ran == 0 {
        println!("checkpoint already at {} steps; nothing to do", start);
    } else {
        println!(
            "ran steps {}..{} (final batch loss {:.6})",
            start + 1,
            cfg.train.steps,
            last_loss
        );
    }
    println!(
        "checkpoint: {} loss log: {}",
        out.display(),
        loss_path.display()
    );
    Ok(())
}
