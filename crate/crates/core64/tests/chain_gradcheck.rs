//! Finite-difference checks run at double precision.

use jhcodec64::gradcheck::suites::{run_module, MODULES};
use jhcodec64::gradcheck::DEFAULT_TOLERANCE;

#[test]
fn element_type_is_double() {
    assert_eq!(std::mem::size_of::<jhcodec64::Real>(), 8);
}

#[test]
fn every_suite_passes_at_double_precision() {
    let mut failures = Vec::new();
    for m in MODULES {
        for seed in 0..10 {
            for r in run_module(m, seed).unwrap() {
                println!("{m:8} seed {seed} {:24} {:.2e}", r.name, r.max_rel_err);
                if !r.passes(DEFAULT_TOLERANCE as jhcodec64::Real) {
                    failures.push(format!("{} seed {seed}: {:.2e} at {}", r.name, r.max_rel_err, r.worst));
                }
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
