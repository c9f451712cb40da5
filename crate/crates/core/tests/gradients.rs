//! Finite-difference checks of every taped operation and of the full model.

mod common;
mod grad_suite;

#[test]
fn elementwise_and_broadcast() {
    grad_suite::elementwise_and_broadcast();
}

#[test]
fn structural_ops() {
    grad_suite::structural_ops();
}

#[test]
fn unary_ops() {
    grad_suite::unary_ops();
}

#[test]
fn softmax_and_norms() {
    grad_suite::softmax_and_norms();
}

#[test]
fn linear_with_and_without_bias() {
    grad_suite::linear_with_and_without_bias();
}

#[test]
fn conv2d_family() {
    grad_suite::conv2d_family();
}

#[test]
fn conv3d_family() {
    grad_suite::conv3d_family();
}

#[test]
fn selective_scan() {
    grad_suite::selective_scan();
}

#[test]
fn correlation_volume() {
    grad_suite::correlation_volume();
}

#[test]
fn upsample_and_regression_ops() {
    grad_suite::upsample_and_regression_ops();
}

#[test]
fn three_layer_composite() {
    grad_suite::three_layer_composite();
}

#[test]
fn full_tiny_model_matches_finite_differences() {
    grad_suite::full_tiny_model_matches_finite_differences();
}
