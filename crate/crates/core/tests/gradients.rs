//! Each differentiable operation against central finite differences.

use mvdistill::gradsuite::{check_names, run_suite, GRAD_TOLERANCE};

#[test]
fn every_operation_within_tolerance_over_twenty_seeds() {
    let seeds: Vec<u64> = (0..20).collect();
    let checks = run_suite(&seeds).unwrap();
    assert_eq!(checks.len(), check_names().len());
    for c in &checks {
        assert_eq!(c.seeds, seeds.len(), "{}", c.name);
        assert!(c.max_error < GRAD_TOLERANCE, "{}: relative error {:e}", c.name, c.max_error);
    }
}

#[test]
fn suite_covers_model_and_objective() {
    let names = check_names();
    for needed in ["conv2d", "layer_norm", "attention", "kd_loss", "hmd_loss", "weighted_fuse", "cross_entropy"] {
        assert!(names.iter().any(|n| n.starts_with(needed)), "missing {needed}");
    }
    assert!(names.iter().any(|n| n.contains("end_to_end")));
}
