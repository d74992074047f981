//! `infer`: ground a single query graph against a candidate file.
//!
//! Always reports per-node top-k candidates from marginal inference, plus an
//! assignment whose source depends on the mode: independent per-node argmax
//! (`marginal`), dual-ascent MAP (`map`), or MAP refined to all-distinct
//! boxes by annealing (`map-distinct`).  `--verify` cross-checks the result
//! against exact enumeration whenever the state space permits.

use std::path::Path;

use scene_mrf::bp::{infer_marginals, LoopyOptions};
use scene_mrf::graph::{
    build_scene_mrf, energy_of_assignment, query_from_json, Assignment, CandidateSet, SceneMrf,
    GENERIC_CATEGORY,
};
use scene_mrf::map::{
    brute_force_map, brute_force_marginals, constrained_refine_mcmc, mplp_map, tree_map, MapError,
    MplpOptions,
};
use scene_mrf::model::forward_energies;
use scene_mrf::world::ranked_by_prob;
use serde_json::json;

use crate::eval::load_model;
use crate::{runtime, validation, CliError, InferMode};

/// Steps for the distinctness refinement; matches the evaluation elsewhere.
const REFINE_STEPS: usize = 2000;

fn argmax_assignment(marginals: &[Vec<f64>]) -> Assignment {
    let boxes = marginals
        .iter()
        .map(|p| {
            let mut best = 0;
            for (b, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = b;
                }
            }
            best
        })
        .collect();
    Assignment { boxes }
}

/// Exact enumeration references, or `None` when the state space is too big.
fn enumerable(m: &SceneMrf) -> bool {
    !matches!(
        brute_force_map(m, false),
        Err(MapError::GuardExceeded { .. })
    )
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    checkpoint: &Path,
    query: &Path,
    candidates: &Path,
    mode: InferMode,
    top_k: usize,
    out: Option<&Path>,
    verify: bool,
    seed: u64,
) -> Result<(), CliError> {
    let ckpt = load_model(checkpoint)?;
    let query_text = std::fs::read_to_string(query)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", query.display())))?;
    let q = query_from_json(&query_text, &ckpt.vocab).map_err(validation)?;
    let cand_text = std::fs::read_to_string(candidates)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", candidates.display())))?;
    let c: CandidateSet = serde_json::from_str(&cand_text).map_err(|e| {
        CliError::Validation(format!("bad candidate file {}: {e}", candidates.display()))
    })?;
    if c.n_boxes() == 0 {
        return Err(CliError::Validation("candidate set is empty".into()));
    }
    if c.feature_dim() != ckpt.params.dims.raw_feat {
        return Err(CliError::Validation(format!(
            "candidate features have {} dims, the model expects {}",
            c.feature_dim(),
            ckpt.params.dims.raw_feat
        )));
    }
    if mode == InferMode::MapDistinct && q.n_nodes() > c.n_boxes() {
        return Err(CliError::Validation(format!(
            "distinct grounding of {} nodes needs at least that many candidates, got {}",
            q.n_nodes(),
            c.n_boxes()
        )));
    }

    let (u, e) = forward_energies(&ckpt.params, &c, &ckpt.freq).map_err(runtime)?;
    let m = build_scene_mrf(&q, &u, &e).map_err(runtime)?;
    let bp = infer_marginals(&m, LoopyOptions::default()).map_err(runtime)?;
    let marginals: Vec<Vec<f64>> = bp.marginals.iter().map(|t| t.data().to_vec()).collect();
    let exact_bp = m.components().iter().all(|(_, sub)| sub.is_tree());

    let mut dual_bound = None;
    let assignment = match mode {
        InferMode::Marginal => argmax_assignment(&marginals),
        InferMode::Map => {
            let r = mplp_map(&m, MplpOptions::default()).map_err(runtime)?;
            dual_bound = r.dual_bound;
            r.assignment
        }
        InferMode::MapDistinct => {
            let init = mplp_map(&m, MplpOptions::default()).map_err(runtime)?;
            constrained_refine_mcmc(&m, &init.assignment, REFINE_STEPS, seed)
                .map_err(runtime)?
                .assignment
        }
    };
    let energy = energy_of_assignment(&m, &assignment).map_err(runtime)?;

    let nodes: Vec<serde_json::Value> = q
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let category = if n.is_generic {
                GENERIC_CATEGORY.to_string()
            } else {
                ckpt.vocab.objects[n.category].clone()
            };
            let ranked = ranked_by_prob(&marginals[i]);
            let top: Vec<serde_json::Value> = ranked
                .iter()
                .take(top_k)
                .map(|&b| json!({ "box": b, "prob": marginals[i][b] }))
                .collect();
            json!({ "id": n.id, "category": category, "top": top })
        })
        .collect();

    let mode_name = match mode {
        InferMode::Marginal => "marginal",
        InferMode::Map => "map",
        InferMode::MapDistinct => "map-distinct",
    };
    let mut report = json!({
        "mode": mode_name,
        "assignment": assignment.boxes,
        "energy": energy,
        "distinct": assignment.is_distinct(),
        "log_partition": bp.log_partition.item(),
        "bp_exact": exact_bp,
        "bp_converged": bp.converged,
        "nodes": nodes,
    });
    if let Some(d) = dual_bound {
        report["dual_bound"] = json!(d);
    }
    if verify {
        report["verify"] = run_verify(&m, mode, &assignment, energy, &marginals, &bp, exact_bp)?;
    }

    let text = format!("{:#}\n", report);
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text).map_err(runtime)?;
    }
    Ok(())
}

/// Cross-check the reported result against independent solvers.  Exact
/// claims (tree BP, tree MAP, distinctness) hard-fail on disagreement;
/// approximate ones only report their gaps.
fn run_verify(
    m: &SceneMrf,
    mode: InferMode,
    assignment: &Assignment,
    energy: f64,
    marginals: &[Vec<f64>],
    bp: &scene_mrf::bp::BpResult,
    exact_bp: bool,
) -> Result<serde_json::Value, CliError> {
    if !enumerable(m) {
        return Ok(json!({ "reference": "skipped: state space exceeds the enumeration guard" }));
    }
    match mode {
        InferMode::Marginal => {
            let reference = brute_force_marginals(m).map_err(runtime)?;
            let mut max_err: f64 = 0.0;
            for (i, p) in marginals.iter().enumerate() {
                let r = reference.marginals[i].data();
                for (b, &v) in p.iter().enumerate() {
                    max_err = max_err.max((v.ln() - r[b].ln()).abs());
                }
            }
            let logz_err = (bp.log_partition.item() - reference.log_partition.item()).abs();
            if exact_bp && (max_err > 1e-9 || logz_err > 1e-9) {
                return Err(CliError::Runtime(format!(
                    "verify: tree marginals drifted from enumeration \
                     (max log-marginal error {max_err:.3e}, logZ error {logz_err:.3e})"
                )));
            }
            Ok(json!({
                "reference": "enumeration",
                "exact_expected": exact_bp,
                "max_log_marginal_error": max_err,
                "log_partition_error": logz_err,
            }))
        }
        InferMode::Map => {
            let exact = brute_force_map(m, false).map_err(runtime)?;
            let gap = energy - exact.energy;
            if m.is_tree() {
                let t = tree_map(m).map_err(runtime)?;
                if energy != t.energy {
                    return Err(CliError::Runtime(format!(
                        "verify: tree MAP energy {energy} differs from the \
                         exact max-product energy {}",
                        t.energy
                    )));
                }
            }
            Ok(json!({
                "reference": "enumeration",
                "optimal_energy": exact.energy,
                "energy_gap_vs_optimal": gap,
            }))
        }
        InferMode::MapDistinct => {
            if !assignment.is_distinct() {
                return Err(CliError::Runtime(
                    "verify: map-distinct returned a repeated box".into(),
                ));
            }
            let exact = brute_force_map(m, true).map_err(runtime)?;
            let gap = energy - exact.energy;
            if gap < -1e-9 {
                return Err(CliError::Runtime(format!(
                    "verify: refined energy {energy} beats the exact distinct \
                     optimum {}; the enumeration is wrong",
                    exact.energy
                )));
            }
            Ok(json!({
                "reference": "enumeration",
                "optimal_energy": exact.energy,
                "energy_gap_vs_optimal": gap,
                "matched_optimum": gap <= 1e-9,
            }))
        }
    }
}
