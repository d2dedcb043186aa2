//! Every hand-derived backward pass against central finite differences
//! (h = 1e-3, f64): the conv primitives, the activations, and both loss
//! heads end to end, over ten seeds each.

mod common;

use amrpn_core::conv::{conv2d_backward, conv2d_forward, ConvLayer, GradientTape};
use amrpn_core::rpn::RegDivisor;
use common::gradchecks::{
    conv2d_err, conv3d_err, mask_loss_err, maxpool_err, pixel_softmax_err, rand_tensor, relu_err,
    rpn_loss_err, weighted_sum, SEEDS,
};
use common::{gradcheck_params, rel_err, FD_H, FD_TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn conv2d_gradients_match_finite_differences() {
    for seed in SEEDS {
        let e = conv2d_err(seed);
        assert!(e <= FD_TOL, "seed {seed}: conv2d rel err {e}");
    }
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    for seed in SEEDS {
        let e = conv3d_err(seed);
        assert!(e <= FD_TOL, "seed {seed}: conv3d rel err {e}");
    }
}

#[test]
fn relu_gradient_matches_finite_differences() {
    for seed in SEEDS {
        let e = relu_err(seed);
        assert!(e <= FD_TOL, "seed {seed}: relu rel err {e}");
    }
}

#[test]
fn pixel_softmax_gradient_matches_finite_differences() {
    for seed in SEEDS {
        let e = pixel_softmax_err(seed);
        assert!(e <= FD_TOL, "seed {seed}: pixel_softmax rel err {e}");
    }
}

#[test]
fn maxpool_gradient_matches_finite_differences() {
    for seed in SEEDS {
        let e = maxpool_err(seed);
        assert!(e <= FD_TOL, "seed {seed}: maxpool rel err {e}");
    }
}

#[test]
fn rpn_loss_end_to_end_matches_finite_differences() {
    for (si, seed) in SEEDS.into_iter().enumerate() {
        // Alternate the regression normalizer so both variants get
        // checked end to end.
        let divisor =
            if si % 2 == 0 { RegDivisor::ValidCount } else { RegDivisor::PositiveCount };
        let e = rpn_loss_err(seed, divisor);
        assert!(e <= FD_TOL, "seed {seed} ({divisor:?}): rpn loss rel err {e}");
    }
}

#[test]
fn mask_loss_end_to_end_matches_finite_differences() {
    for (si, seed) in SEEDS.into_iter().enumerate() {
        // Alternate the head kernel so both the 1x1 and 3x3 forms of the
        // final convolutions are covered.
        let fc_kernel = if si % 2 == 0 { 1 } else { 3 };
        let e = mask_loss_err(seed, fc_kernel);
        assert!(e <= FD_TOL, "seed {seed} (fc_kernel {fc_kernel}): mask loss rel err {e}");
    }
}

/// The whole suite has to clear the finite-difference tolerance with real
/// margin; this canary fails if the checker itself is miswired (a
/// deliberately wrong gradient must be caught).
#[test]
fn gradcheck_detects_a_wrong_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut layer = ConvLayer::new_2d(1, 1, 3, 1, 1, &mut rng);
    let input = rand_tensor(&[1, 4, 4], &mut rng);
    let out = conv2d_forward(&input, &layer).unwrap();
    let c = rand_tensor(out.dims(), &mut rng);
    let (mut grads, _) = conv2d_backward(&input, &layer, &c).unwrap();
    grads.d_weights.data_mut()[0] += 0.5;
    let tape = GradientTape { layers: vec![grads] };
    let e = gradcheck_params(&mut layer, &tape, |l| {
        weighted_sum(&conv2d_forward(&input, l).unwrap(), &c)
    });
    assert!(e > FD_TOL, "sabotaged gradient must be detected, got {e}");
    assert!(rel_err(1.0, 1.0 + 2.0 * FD_H) > FD_TOL);
}
