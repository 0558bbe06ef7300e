mod support;

use support::gradcheck::{adjoint_gap, run_suite};

#[test]
fn every_layer_and_loss_matches_finite_differences() {
    let worst = run_suite(20).unwrap();
    assert_eq!(worst.len(), 16);
    for (name, e) in &worst {
        println!("{name:<30} {e:.3e}");
    }
    let bad: Vec<_> = worst.iter().filter(|(_, e)| *e >= 1e-4).collect();
    assert!(bad.is_empty(), "relative error too large: {bad:?}");
}

#[test]
fn transposed_conv_is_the_adjoint_of_conv() {
    for seed in 0..20 {
        assert!(adjoint_gap(seed).unwrap() < 1e-12);
    }
}
