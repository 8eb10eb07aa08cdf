//! Analytic gradients against central finite differences.

mod common;

use common::checks::{self, worst_over_points, GRAD_TOL};

fn at_points(name: &str, check: impl Fn(u64) -> f64) {
    let worst = worst_over_points(check);
    assert!(worst < GRAD_TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn matmul_matrix_and_vector() {
    at_points("matmul", checks::matmul);
}

#[test]
fn sum_of_product_3x3() {
    at_points("sum(a*b)", checks::sum_of_product);
}

#[test]
fn conv2d_with_stride_and_padding() {
    at_points("conv2d", checks::conv2d);
}

#[test]
fn binary_ops_with_broadcast() {
    at_points("add/sub/mul", checks::binary_ops);
}

#[test]
fn pointwise_nonlinearities() {
    at_points("sigmoid/tanh/relu/scale", checks::pointwise);
}

#[test]
fn softmax_jacobian() {
    at_points("softmax", checks::softmax);
}

#[test]
fn reductions_and_reshaping() {
    at_points("sum/mean/slice/concat/reshape/column/row_mean", checks::reductions);
}

#[test]
fn average_pool() {
    at_points("avg_pool2", checks::avg_pool);
}

#[test]
fn channel_affine_normalization() {
    at_points("channel_affine", checks::channel_affine);
}

#[test]
fn losses() {
    at_points("nll_pick/bce", checks::losses);
}

#[test]
fn composite_matmul_tanh_conv() {
    at_points("matmul∘tanh∘conv2d", checks::composite);
}

#[test]
fn teacher_forced_rollout_without_biases() {
    at_points("rollout (strict gates)", |s| checks::rollout(s, false));
}

#[test]
fn teacher_forced_rollout_with_biases() {
    at_points("rollout (gate biases)", |s| checks::rollout(s, true));
}

/// Whole model, image to loss, checked on the parameter store.
#[test]
fn encoder_decoder_end_to_end() {
    for seed in 0..3 {
        let worst = checks::end_to_end(seed);
        assert!(worst < GRAD_TOL, "seed {seed}: {worst:e}");
    }
}
