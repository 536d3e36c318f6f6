mod common;

use common::finite_difference_check;
use loopgan::objective::GanMode;

#[test]
fn full_objective_gradients_match_central_differences() {
    let rep = finite_difference_check(11, GanMode::LeastSquares, 260);
    println!("{rep:?}");
    assert!(rep.checked >= 500);
    assert!(rep.max_rel <= 1e-3, "max rel err {} at {}", rep.max_rel, rep.worst);
}

#[test]
fn nonsaturating_mode_gradients_match() {
    let rep = finite_difference_check(5, GanMode::NonsaturatingLog, 60);
    assert!(rep.max_rel <= 1e-3, "max rel err {} at {}", rep.max_rel, rep.worst);
}

#[test]
fn biases_ahead_of_instance_norm_get_zero_gradient() {
    let rep = finite_difference_check(3, GanMode::LeastSquares, 1);
    assert!(rep.max_cancelled_bias_grad < 1e-10, "{}", rep.max_cancelled_bias_grad);
}
