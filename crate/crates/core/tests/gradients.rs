use std::time::Instant;

use cmc_core::verify;

#[test]
fn every_op_matches_central_differences() {
    let start = Instant::now();
    let results = verify::gradient_suite(2024, 100).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    for (name, cases, worst) in &results {
        assert!(*cases >= 100, "{name}: only {cases} cases");
        assert!(*worst < verify::GRAD_TOL, "{name}: relative error {worst:e}");
    }
    for op in ["fullgraph_loss", "contrastive_end_to_end", "segmentation_end_to_end", "conv2d", "batchnorm"] {
        assert!(results.iter().any(|(n, _, _)| n == op), "missing {op}");
    }
    assert!(elapsed < 60.0, "took {elapsed:.1}s");
}
