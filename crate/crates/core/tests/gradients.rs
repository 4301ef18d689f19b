//! Analytic gradients against central finite differences.

mod common;

use common::gradient_instance;

#[test]
fn hundred_random_instances_agree() {
    let worst = (0..100u64).map(gradient_instance).fold(0.0f64, f64::max);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}
