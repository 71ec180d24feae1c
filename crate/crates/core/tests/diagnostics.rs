use protodepth_core::diagnostics::gradient_suite_with;
use protodepth_core::tensor::GRAD_CHECK_EPS;

#[test]
fn filtered_checks_pass() {
    let out = gradient_suite_with(GRAD_CHECK_EPS, |n| !n.starts_with("training objective")).unwrap();
    assert!(out.len() > 20, "{} checks", out.len());
    for o in &out {
        assert!(o.passed(), "{}: rel {} (analytic {} numeric {})", o.name, o.max_rel_error, o.analytic, o.numeric);
        assert!(!o.name.starts_with("training objective"));
    }
}

#[test]
fn filter_can_select_nothing() {
    assert!(gradient_suite_with(GRAD_CHECK_EPS, |_| false).unwrap().is_empty());
}

#[test]
fn a_huge_step_is_caught() {
    let out = gradient_suite_with(1.0, |n| n == "softmax_rows").unwrap();
    assert_eq!(out.len(), 1);
    assert!(!out[0].passed(), "rel {}", out[0].max_rel_error);
}
