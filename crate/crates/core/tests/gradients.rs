use streamvc::numerics::gradcheck::{suite, Kernel};

#[test]
fn hundred_random_shapes_match_finite_differences() {
    let results = suite(100, 2024).unwrap();
    assert_eq!(results.len(), 100);
    for k in Kernel::ALL {
        assert!(results.iter().any(|r| r.kernel == k), "{k:?} not exercised");
    }
    let worst = results.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    assert!(worst.rel_error < 1e-4, "{worst:?}");
}

#[test]
fn different_seeds_draw_different_shapes() {
    let a = suite(23, 1).unwrap();
    let b = suite(23, 2).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| x.shapes != y.shapes));
}
