use proptest::prelude::*;
use rvlab_core::gradcheck::suite;

const TOLERANCE: f64 = 1e-6;

#[test]
fn every_op_and_path_matches_finite_differences() {
    let entries = suite(20, 2024).unwrap();
    let bad: Vec<_> = entries.iter().filter(|e| !(e.max_rel_error < TOLERANCE)).collect();
    assert!(bad.is_empty(), "{bad:#?}");
    assert!(entries.iter().all(|e| e.instances == 20));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn gradients_hold_for_arbitrary_seeds(seed in any::<u64>()) {
        for e in suite(1, seed).unwrap() {
            prop_assert!(e.max_rel_error < TOLERANCE, "{} at seed {}: {}", e.name, seed, e.max_rel_error);
        }
    }
}
