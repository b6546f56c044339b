//! Every differentiable operation against central finite differences.

use std::time::Instant;

use esplit_core::gradcheck::suite;

#[test]
fn all_operations_match_finite_differences() {
    let start = Instant::now();
    let results = suite(20, 0xF1_D1FF).unwrap();
    let elapsed = start.elapsed();
    let mut failed = Vec::new();
    for r in &results {
        println!("{:<28} n={} max_rel_err={:.3e}", r.op, r.instances, r.max_rel_err);
        if !(r.max_rel_err < 1e-4) {
            failed.push(r.op);
        }
    }
    for op in ["gdn", "igdn", "rd_loss", "kd_loss", "rate_bits"] {
        assert!(results.iter().any(|r| r.op == op), "{op} missing from the suite");
    }
    assert!(failed.is_empty(), "gradient mismatch: {failed:?}");
    assert!(elapsed.as_secs() < 120, "suite took {elapsed:?}");
}
