//! `oracle-check`: run the brute-force equivalence and identity suites.
//!
//! Six independent checks compare the fast paths against enumeration,
//! finite differences, and closed-form identities, printing one PASS/FAIL
//! line each with the largest observed error.  `--self-test` injects a
//! deliberate perturbation into the checked quantities; the suite must then
//! fail, proving that failures actually propagate to the exit code.

use scene_mrf::oracle::run_all_checks;
use scene_mrf::util::mix_seed;

use crate::CliError;

/// Magnitude of the injected self-test perturbation; far above every suite
/// tolerance, far below anything that could overflow.
const SELF_TEST_PERTURB: f64 = 1e-3;

pub fn run(seed: u64, trials: u64, self_test: bool) -> Result<(), CliError> {
    let perturb = if self_test { SELF_TEST_PERTURB } else { 0.0 };
    if self_test {
        println!("self-test: perturbing checked quantities by {SELF_TEST_PERTURB:e}; failures are the expected outcome");
    }
    let mut failures = 0usize;
    for trial in 0..trials.max(1) {
        let report = run_all_checks(mix_seed(&[seed, trial]), perturb);
        for check in &report.checks {
            let status = if check.passed { "PASS" } else { "FAIL" };
            println!("trial {trial} {status} {}: {}", check.name, check.details);
            if !check.passed {
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(CliError::Runtime(format!(
            "{failures} oracle check(s) failed"
        )));
    }
    if self_test {
        return Err(CliError::Runtime(
            "self-test: the perturbed suite passed, so failures would go undetected".into(),
        ));
    }
    println!("all oracle checks passed");
    Ok(())
}
