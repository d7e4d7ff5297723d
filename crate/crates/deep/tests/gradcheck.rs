use xva_deep::gradcheck::{check_lstm_cell, check_primitives, check_rollout, check_two_layer_mlp, relative_error};

#[test]
fn every_primitive_matches_central_differences() {
    let results = check_primitives(7).unwrap();
    assert_eq!(results.len(), 20);
    for r in &results {
        assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn lstm_cell_matches_central_differences() {
    for seed in [1, 2, 3] {
        let r = check_lstm_cell(seed).unwrap();
        assert!(r.passed(), "seed {seed}: {:e}", r.max_rel_error);
    }
}

#[test]
fn two_layer_network_over_random_draws() {
    let r = check_two_layer_mlp(11, 100).unwrap();
    assert_eq!(r.entries, 100 * (18 + 6 + 6 + 1));
    assert!(r.passed(), "{:e}", r.max_rel_error);
}

#[test]
fn miniature_rollout_matches_central_differences() {
    let r = check_rollout(5).unwrap();
    assert!(r.entries > 2000);
    assert!(r.passed(), "{:e}", r.max_rel_error);
}

#[test]
fn relative_error_uses_floor() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
}
