//! Finite-difference checks for every hand-derived backward pass, shaped
//! as reusable per-seed probes so both the focused gradient suite and the
//! acceptance gate can run them.

use amrpn_core::conv::{
    conv2d_backward, conv2d_forward, conv3d_backward, conv3d_forward, ConvLayer, GradientTape,
};
use amrpn_core::geometry::{AnchorGrid, BBox};
use amrpn_core::heatmap::{binarize, HeatMapHistory, IouHeatMap};
use amrpn_core::masknet::{
    loss_mask, masknet_forward_cached, masknet_loss_and_grads, MaskNet, MaskNetConfig,
};
use amrpn_core::nn::{
    maxpool2_backward, maxpool2_forward, pixel_softmax_backward, pixel_softmax_forward,
    relu_backward, relu_forward,
};
use amrpn_core::rpn::{
    label_anchors, loss_rpn_reg, loss_rpn_scores, loss_rpn_total, rpn_forward_cached,
    rpn_loss_and_grads, RegDivisor, RpnHead,
};
use amrpn_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck_input, gradcheck_params, ParamNet};

pub const SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

/// Margin every kink (relu zero crossings, smooth-L1 curvature switches
/// at |residual| = 1) must clear for central differences at h = 1e-3 to
/// stay on one smooth piece.
pub const KINK_MARGIN: f64 = 5e-3;

pub fn rand_tensor(dims: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum of a tensor against fixed coefficients — a linear
/// functional, so its gradient w.r.t. the tensor is the coefficients.
pub fn weighted_sum(t: &Tensor, c: &Tensor) -> f64 {
    t.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

/// Replaces the zero-initialized biases with nonzero draws. Zero biases
/// leave units with all-zero receptive fields sitting exactly on the
/// relu kink, where finite differences are undefined; the gradient
/// identity has to hold at any differentiable point, so we test at a
/// generic one.
pub fn randomize_biases(layers: Vec<&mut ConvLayer>, rng: &mut impl Rng) {
    for l in layers {
        for b in &mut l.bias {
            *b = rng.gen_range(0.05..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
}

/// Max relative error of the conv2d parameter and input gradients across
/// a padded unit-stride case and a strided unpadded case.
pub fn conv2d_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    // Odd extents catch transposed indexing.
    for (in_c, out_c, k, stride, pad, ih, iw) in [(2, 3, 3, 1, 1, 4, 5), (1, 2, 3, 2, 0, 7, 6)] {
        let mut layer = ConvLayer::new_2d(in_c, out_c, k, stride, pad, &mut rng);
        let mut input = rand_tensor(&[in_c, ih, iw], &mut rng);
        let out = conv2d_forward(&input, &layer).unwrap();
        let c = rand_tensor(out.dims(), &mut rng);
        let (grads, d_input) = conv2d_backward(&input, &layer, &c).unwrap();
        let tape = GradientTape { layers: vec![grads] };

        let input_ref = input.clone();
        let e1 = gradcheck_params(&mut layer, &tape, |l| {
            weighted_sum(&conv2d_forward(&input_ref, l).unwrap(), &c)
        });
        let layer_ref = layer.clone();
        let e2 = gradcheck_input(&mut input, &d_input, |x| {
            weighted_sum(&conv2d_forward(x, &layer_ref).unwrap(), &c)
        });
        worst = worst.max(e1).max(e2);
    }
    worst
}

/// Max relative error of the conv3d parameter and input gradients on a
/// kt=2 temporal compression (T 3 -> 2).
pub fn conv3d_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = ConvLayer::new_3d(1, 2, 2, 3, 1, 1, 0, &mut rng);
    let mut input = rand_tensor(&[3, 1, 4, 4], &mut rng);
    let out = conv3d_forward(&input, &layer).unwrap();
    assert_eq!(out.dims()[0], 2, "temporal extent 3 -> 2 with kt=2");
    let c = rand_tensor(out.dims(), &mut rng);
    let (grads, d_input) = conv3d_backward(&input, &layer, &c).unwrap();
    let tape = GradientTape { layers: vec![grads] };

    let input_ref = input.clone();
    let e1 = gradcheck_params(&mut layer, &tape, |l| {
        weighted_sum(&conv3d_forward(&input_ref, l).unwrap(), &c)
    });
    let layer_ref = layer.clone();
    let e2 = gradcheck_input(&mut input, &d_input, |x| {
        weighted_sum(&conv3d_forward(x, &layer_ref).unwrap(), &c)
    });
    e1.max(e2)
}

pub fn relu_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep inputs clear of the kink at 0 so the finite difference stays
    // on one smooth piece.
    let data: Vec<f64> = (0..18)
        .map(|_| rng.gen_range(0.05..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let mut x = Tensor::new(&[2, 3, 3], data).unwrap();
    let c = rand_tensor(&[2, 3, 3], &mut rng);
    let d_in = relu_backward(&x, &c).unwrap();
    gradcheck_input(&mut x, &d_in, |t| weighted_sum(&relu_forward(t), &c))
}

pub fn pixel_softmax_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits = rand_tensor(&[2, 3, 3], &mut rng);
    let c = rand_tensor(&[2, 3, 3], &mut rng);
    let y = pixel_softmax_forward(&logits).unwrap();
    let d_in = pixel_softmax_backward(&y, &c).unwrap();
    gradcheck_input(&mut logits, &d_in, |t| {
        weighted_sum(&pixel_softmax_forward(t).unwrap(), &c)
    })
}

pub fn maxpool_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = rand_tensor(&[2, 4, 6], &mut rng);
    let c = rand_tensor(&[2, 2, 3], &mut rng);
    let (_, argmax) = maxpool2_forward(&x).unwrap();
    let d_in = maxpool2_backward(&[2, 4, 6], &argmax, &c).unwrap();
    gradcheck_input(&mut x, &d_in, |t| weighted_sum(&maxpool2_forward(t).unwrap().0, &c))
}

/// Wrapper giving the RPN head the ordered-parameter view the checker
/// wants (shared, score, delta — the tape order).
pub struct RpnParams(pub RpnHead);

impl ParamNet for RpnParams {
    fn params_mut(&mut self) -> Vec<&mut ConvLayer> {
        vec![&mut self.0.conv_shared, &mut self.0.conv_score, &mut self.0.conv_delta]
    }
}

/// Max relative error of the full RPN loss gradient (score + regression)
/// over head parameters and input features.
pub fn rpn_loss_err(seed: u64, divisor: RegDivisor) -> f64 {
    let grid = AnchorGrid::new(3, 3, 16.0, &[16.0, 32.0], &[0.5, 1.0]).unwrap();
    // Finite differences require a differentiable neighborhood, so draw
    // states until every kink is cleared by a safe margin; the gradient
    // identity itself holds at any such point.
    let (head, mut features, labels, fwd) = (0u64..100)
        .find_map(|sub| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + sub);
            let mut head = RpnHead::new(3, grid.k(), &mut rng);
            randomize_biases(
                vec![&mut head.conv_shared, &mut head.conv_score, &mut head.conv_delta],
                &mut rng,
            );
            let features = rand_tensor(&[3, 3, 3], &mut rng);
            let gt = {
                let cx = rng.gen_range(10.0..38.0);
                let cy = rng.gen_range(10.0..38.0);
                let w = rng.gen_range(8.0..30.0);
                let h = rng.gen_range(8.0..30.0);
                BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            };
            let labels = label_anchors(&grid, &gt, 0.7, 0.3, 3, seed).unwrap();
            let fwd = rpn_forward_cached(&features, &head, &grid).unwrap();
            if fwd.min_abs_preactivation() <= KINK_MARGIN {
                return None;
            }
            let residual_clear = labels.labels.iter().enumerate().all(|(i, &l)| {
                l != 1 || {
                    let t = labels.targets[i].unwrap();
                    let d = fwd.output.deltas[i];
                    [d.tx - t.tx, d.ty - t.ty, d.tw - t.tw, d.th - t.th]
                        .iter()
                        .all(|r| (r.abs() - 1.0).abs() > KINK_MARGIN)
                }
            });
            residual_clear.then_some((head, features, labels, fwd))
        })
        .unwrap();
    let (_, _, tape, d_input) = rpn_loss_and_grads(&fwd, &head, &labels, divisor).unwrap();

    let loss_of = |h: &RpnHead, f: &Tensor| {
        let fw = rpn_forward_cached(f, h, &grid).unwrap();
        loss_rpn_total(
            loss_rpn_scores(&fw.output, &labels).unwrap(),
            loss_rpn_reg(&fw.output, &labels, divisor).unwrap(),
        )
    };
    let features_ref = features.clone();
    let mut params = RpnParams(head);
    let e1 = gradcheck_params(&mut params, &tape, |p| loss_of(&p.0, &features_ref));
    let head_ref = params.0;
    let e2 = gradcheck_input(&mut features, &d_input, |f| loss_of(&head_ref, f));
    e1.max(e2)
}

/// Ordered-parameter view of the mask net (the 6-layer tape order).
pub struct MaskParams(pub MaskNet);

impl ParamNet for MaskParams {
    fn params_mut(&mut self) -> Vec<&mut ConvLayer> {
        self.0.layers_mut().into()
    }
}

/// Max relative error of the mask cross-entropy gradient over all six
/// layers of the mask net.
pub fn mask_loss_err(seed: u64, fc_kernel: usize) -> f64 {
    let cfg = MaskNetConfig { ch_3d_1: 2, ch_3d_2: 2, ch_2d: 2, ch_fc: 2, fc_kernel };
    // As in the RPN case: resample until no relu unit sits within the
    // finite-difference window of its kink.
    let (net, history, label, fwd) = (0u64..100)
        .find_map(|sub| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + sub);
            let mut net = MaskNet::new(&cfg, &mut rng).unwrap();
            randomize_biases(net.layers_mut().into(), &mut rng);
            // Dense heat maps (the third history slot is padded
            // internally); dense values avoid all-zero receptive fields,
            // which would park units exactly on the kink.
            let mut history = HeatMapHistory::new(4, 4);
            for t in 0..2 {
                let map =
                    IouHeatMap::new(4, 4, (0..16).map(|_| rng.gen_range(0.05..1.0)).collect())
                        .unwrap();
                history.push(t, map).unwrap();
            }
            let label_map = IouHeatMap::new(
                4,
                4,
                (0..16)
                    .map(|_| if rng.gen_bool(0.4) { rng.gen_range(0.3..1.0) } else { 0.0 })
                    .collect(),
            )
            .unwrap();
            let label = binarize(&label_map);
            let fwd = masknet_forward_cached(&history, &net).unwrap();
            (fwd.min_abs_preactivation() > KINK_MARGIN).then_some((net, history, label, fwd))
        })
        .unwrap();
    let (_, tape) = masknet_loss_and_grads(&fwd, &net, &label).unwrap();

    let history_ref = history;
    let mut params = MaskParams(net);
    gradcheck_params(&mut params, &tape, |p| {
        let fw = masknet_forward_cached(&history_ref, &p.0).unwrap();
        loss_mask(&fw.probs, &label).unwrap()
    })
}
