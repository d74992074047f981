//! The randomized cross-check suite is exposed to users through the CLI with
//! an arbitrary seed, so it must pass for any seed, and must fail when its
//! checked quantities are deliberately perturbed.

use scene_mrf::oracle::run_all_checks;

#[test]
fn suite_passes_for_arbitrary_seeds() {
    for seed in [0, 1, 2, 3, 1729, 0xDEADBEEF, u64::MAX / 7] {
        let report = run_all_checks(seed, 0.0);
        for check in &report.checks {
            assert!(
                check.passed,
                "seed {seed}: {} failed: {}",
                check.name, check.details
            );
        }
    }
}

#[test]
fn perturbation_is_detected() {
    let report = run_all_checks(17, 1e-3);
    assert!(
        report.checks.iter().any(|c| !c.passed),
        "a perturbed suite reported no failures, so real regressions would \
         go undetected"
    );
}
