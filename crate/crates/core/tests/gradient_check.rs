//! Reverse-mode gradients of the full pipeline against central differences.

mod common;

use common::{fd_gradient_pair, FdOutcome};

#[test]
fn full_pipeline_gradients_match_central_differences() {
    for seed in 0..3 {
        let FdOutcome {
            iterations,
            worst_rel,
            failures,
            params,
        } = fd_gradient_pair(seed);
        assert!(iterations >= 3, "seed {seed}: {iterations} iterations");
        assert_eq!(failures, 0, "seed {seed}: {failures}/{params} mismatches, worst {worst_rel:.2e}");
    }
}
