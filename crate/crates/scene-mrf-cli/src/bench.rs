//! `bench`: wall-clock timings for the inference routines.
//!
//! Times exact tree propagation, dual-ascent MAP, and annealed distinct
//! refinement on random tree instances across an (N, N_b) grid, reporting
//! mean and 95th-percentile milliseconds per call.  With at least 20 reps
//! the command also sanity-checks that median propagation time does not
//! shrink as the candidate count grows.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scene_mrf::bp::run_bp;
use scene_mrf::graph::{Assignment, SceneMrf};
use scene_mrf::map::{constrained_refine_mcmc, mplp_map, MplpOptions};
use scene_mrf::oracle::random_tree_mrf;
use scene_mrf::util::mix_seed;

use crate::{runtime, CliError};

const ROUTINES: [&str; 3] = ["bp", "mplp", "mcmc"];
/// Annealing steps per refinement call; kept modest so a cell times in ms.
const MCMC_STEPS: usize = 500;

fn parse_list(name: &str, raw: &str) -> Result<Vec<usize>, CliError> {
    let list: Result<Vec<usize>, _> = raw.split(',').map(|s| s.trim().parse()).collect();
    match list {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Validation(format!(
            "--{name} must be a comma-separated list of positive integers, got {raw:?}"
        ))),
    }
}

fn time_routine(routine: &str, m: &SceneMrf, rep: u64, seed: u64) -> Result<f64, CliError> {
    let start = Instant::now();
    match routine {
        "bp" => {
            run_bp(m).map_err(runtime)?;
        }
        "mplp" => {
            mplp_map(m, MplpOptions::default()).map_err(runtime)?;
        }
        "mcmc" => {
            let init = Assignment {
                boxes: vec![0; m.n_vars],
            };
            constrained_refine_mcmc(m, &init, MCMC_STEPS, mix_seed(&[seed, rep]))
                .map_err(runtime)?;
        }
        _ => unreachable!("routine list is fixed"),
    }
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn run(
    n_list: &str,
    nb_list: &str,
    reps: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let ns = parse_list("n-list", n_list)?;
    let nbs = parse_list("nb-list", nb_list)?;
    if reps == 0 {
        return Err(CliError::Validation("--reps must be positive".into()));
    }
    if let Some(&n) = ns.iter().find(|&&n| n > nbs.iter().copied().min().unwrap()) {
        return Err(CliError::Validation(format!(
            "distinct refinement needs N <= N_b everywhere; N={n} exceeds the smallest N_b"
        )));
    }

    let mut csv = String::from("routine,N,N_b,mean_ms,p95_ms\n");
    // Median propagation time per (N, N_b), for the growth sanity check.
    let mut bp_medians: Vec<(usize, usize, f64)> = Vec::new();
    for routine in ROUTINES {
        for &n in &ns {
            for &nb in &nbs {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, n as u64, nb as u64]));
                let m = random_tree_mrf(&mut rng, n, nb, 1.0);
                time_routine(routine, &m, u64::MAX, seed)?; // warm-up, untimed
                let mut times = Vec::with_capacity(reps);
                for rep in 0..reps {
                    times.push(time_routine(routine, &m, rep as u64, seed)?);
                }
                times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mean = times.iter().sum::<f64>() / reps as f64;
                let p95 = times[((reps as f64 * 0.95).ceil() as usize).max(1) - 1];
                csv.push_str(&format!("{routine},{n},{nb},{mean:.4},{p95:.4}\n"));
                if routine == "bp" {
                    bp_medians.push((n, nb, median(&times)));
                }
            }
        }
    }

    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, csv).map_err(runtime)?;
    }

    // With enough reps, medians are stable: propagation over more candidates
    // must not come out faster.
    if reps >= 20 {
        for &n in &ns {
            let mut row: Vec<(usize, f64)> = bp_medians
                .iter()
                .filter(|&&(bn, _, _)| bn == n)
                .map(|&(_, nb, med)| (nb, med))
                .collect();
            row.sort_by_key(|&(nb, _)| nb);
            for pair in row.windows(2) {
                let ((nb_a, med_a), (nb_b, med_b)) = (pair[0], pair[1]);
                if med_b < med_a {
                    return Err(CliError::Runtime(format!(
                        "bp median time fell from {med_a:.4} ms (N_b={nb_a}) to \
                         {med_b:.4} ms (N_b={nb_b}) at N={n}; timings are not trustworthy"
                    )));
                }
            }
        }
    }
    Ok(())
}
