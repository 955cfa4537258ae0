use std::time::Instant;

use lsc::diagnostics::gradient_suite;

#[test]
fn every_operation_passes_finite_differences() {
    let start = Instant::now();
    let cases = gradient_suite(7, 3).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let ops: std::collections::BTreeSet<&str> = cases.iter().map(|c| c.op).collect();
    for op in [
        "logc",
        "sinc_kernel",
        "dconv",
        "linear",
        "softmax",
        "lstm_step",
        "attention",
        "ctc_loss",
        "frontend_chain",
    ] {
        assert!(ops.contains(op), "missing {op}");
        assert_eq!(cases.iter().filter(|c| c.op == op).count(), 3);
    }
    for c in &cases {
        assert!(c.coords_checked > 0, "{c:?}");
        assert!(c.max_rel_error < 1e-4, "{c:?}");
    }
    assert!(elapsed < 60.0, "{elapsed:.1}s");
}
