mod common;

#[test]
fn network_gradients_match_finite_differences() {
    for seed in 0..20 {
        let e = common::gradient_case(seed);
        assert!(e < 1e-4, "case {seed}: relative error {e}");
    }
}
