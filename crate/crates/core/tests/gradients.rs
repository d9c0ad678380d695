//! Analytic gradients against central differences.

mod common;

use common::{network_cases, primitive_cases, run_case};

#[test]
fn primitives_match_finite_differences() {
    for case in primitive_cases() {
        let r = run_case(&case, 0..5);
        assert!(r.passed, "{}: {:?}", r.name, r.worst);
    }
}

#[test]
fn networks_match_finite_differences() {
    for case in network_cases() {
        let r = run_case(&case, 0..2);
        assert!(r.passed, "{}: {:?}", r.name, r.worst);
    }
}
