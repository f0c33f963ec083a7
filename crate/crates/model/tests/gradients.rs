use imd_model::gradcheck::toy_suite;

#[test]
fn all_stages_match_finite_differences() {
    let reports = toy_suite().unwrap();
    assert!(reports.len() > 20);
    for r in &reports {
        println!("{:<48} n={:<3} rel={:.2e} norm={:.3e}", r.name, r.checked, r.rel_error, r.grad_norm);
        assert!(r.rel_error < 1e-3, "{r:?}");
    }
    for stage in ["extract_features", "cross_prompt", "transform_features", "coarse_loss", "fine_loss_l1", "fine_loss_l2"] {
        assert!(
            reports.iter().any(|r| r.name.starts_with(stage) && r.grad_norm > 1e-8),
            "{stage} has no non-trivial gradient"
        );
    }
}
