use dualshot::diagnostics::{gradcheck, GradTarget};
use dualshot::tensor::Fault;

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let r = gradcheck(GradTarget::Net, 1e-3, 5, Fault::None).unwrap();
    println!("net gradcheck: max rel err {:.3e} over {} coords, worst {:?}", r.max_rel_error, r.checked, r.worst);
    assert!(r.passed, "{r:?}");
}

#[test]
fn end_to_end_check_detects_corrupted_backward() {
    let r = gradcheck(GradTarget::Net, 1e-3, 5, Fault::ScaleBackward(1.01)).unwrap();
    assert!(!r.passed, "{r:?}");
}
