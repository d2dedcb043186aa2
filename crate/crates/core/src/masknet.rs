//! Stage-1 mask predictor: two 3-D convs compress the three-frame
//! heat-map history along time, two 2-D convs and two 1x1 "fully
//! convolutional" layers follow, and a per-pixel two-way softmax emits
//! foreground confidences that threshold into the anchor mask.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::conv::{conv2d_backward, conv2d_forward, conv3d_backward, conv3d_forward, ConvLayer, GradientTape};
use crate::error::{Error, Result};
use crate::heatmap::{fuse_with_last, threshold_probs, AnchorMask, HeatMapHistory, IouHeatMap, MaskProbabilities, HISTORY_DEPTH};
use crate::nn::{pixel_softmax_forward, relu_backward, relu_forward};
use crate::rpn::PROB_FLOOR;
use crate::tensor::Tensor;

/// Channel widths and the kernel extent of the two final layers. The
/// temporal kernel extents are fixed at 2 so three input frames compress
/// to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskNetConfig {
    pub ch_3d_1: usize,
    pub ch_3d_2: usize,
    pub ch_2d: usize,
    pub ch_fc: usize,
    /// 1 for pointwise classification layers; 3 selects 3x3 with pad 1.
    pub fc_kernel: usize,
}

impl Default for MaskNetConfig {
    fn default() -> Self {
        MaskNetConfig { ch_3d_1: 8, ch_3d_2: 16, ch_2d: 16, ch_fc: 16, fc_kernel: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskNet {
    pub conv3d_1: ConvLayer,
    pub conv3d_2: ConvLayer,
    pub conv2d_1: ConvLayer,
    pub conv2d_2: ConvLayer,
    pub fc_conv_1: ConvLayer,
    pub fc_conv_2: ConvLayer,
}

impl MaskNet {
    pub fn new(cfg: &MaskNetConfig, rng: &mut impl Rng) -> Result<Self> {
        if [cfg.ch_3d_1, cfg.ch_3d_2, cfg.ch_2d, cfg.ch_fc].contains(&0) {
            return Err(Error::invalid("mask net", "channel widths must be positive".into()));
        }
        let (fk, fp) = match cfg.fc_kernel {
            1 => (1, 0),
            3 => (3, 1),
            other => {
                return Err(Error::invalid(
                    "mask net",
                    alloc::format!("fc kernel must be 1 or 3, got {other}"),
                ))
            }
        };
        Ok(MaskNet {
            conv3d_1: ConvLayer::new_3d(1, cfg.ch_3d_1, 2, 3, 1, 1, 0, rng),
            conv3d_2: ConvLayer::new_3d(cfg.ch_3d_1, cfg.ch_3d_2, 2, 3, 1, 1, 0, rng),
            conv2d_1: ConvLayer::new_2d(cfg.ch_3d_2, cfg.ch_2d, 3, 1, 1, rng),
            conv2d_2: ConvLayer::new_2d(cfg.ch_2d, cfg.ch_2d, 3, 1, 1, rng),
            fc_conv_1: ConvLayer::new_2d(cfg.ch_2d, cfg.ch_fc, fk, 1, fp, rng),
            fc_conv_2: ConvLayer::new_2d(cfg.ch_fc, 2, fk, 1, fp, rng),
        })
    }

    pub fn layers(&self) -> [&ConvLayer; 6] {
        [
            &self.conv3d_1,
            &self.conv3d_2,
            &self.conv2d_1,
            &self.conv2d_2,
            &self.fc_conv_1,
            &self.fc_conv_2,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut ConvLayer; 6] {
        [
            &mut self.conv3d_1,
            &mut self.conv3d_2,
            &mut self.conv2d_1,
            &mut self.conv2d_2,
            &mut self.fc_conv_1,
            &mut self.fc_conv_2,
        ]
    }
}

/// Pads a history to exactly three maps, oldest first, by repeating the
/// oldest available map. An empty history becomes three all-ones maps:
/// with no prior there is nothing to rule out, so the whole frame stays
/// eligible.
pub fn pad_history(history: &HeatMapHistory) -> [IouHeatMap; 3] {
    let maps: Vec<&IouHeatMap> = history.maps().collect();
    match maps.as_slice() {
        [] => {
            let ones = IouHeatMap::ones(history.feat_h, history.feat_w);
            [ones.clone(), ones.clone(), ones]
        }
        [a] => [(*a).clone(), (*a).clone(), (*a).clone()],
        [a, b] => [(*a).clone(), (*a).clone(), (*b).clone()],
        [a, b, c] => [(*a).clone(), (*b).clone(), (*c).clone()],
        _ => unreachable!("history depth bounded by {HISTORY_DEPTH}"),
    }
}

/// Forward activations retained for the backward pass.
pub struct MaskForward {
    pub probs: MaskProbabilities,
    input: Tensor,
    pre_3d_1: Tensor,
    act_3d_1: Tensor,
    pre_3d_2: Tensor,
    act_3d_2: Tensor,
    pre_2d_1: Tensor,
    act_2d_1: Tensor,
    pre_2d_2: Tensor,
    act_2d_2: Tensor,
    pre_fc_1: Tensor,
    act_fc_1: Tensor,
}

impl MaskForward {
    /// Temporal extent after the second 3-D layer (always 1 on a padded
    /// three-frame history).
    pub fn compressed_t(&self) -> usize {
        self.act_3d_2.dims()[0]
    }

    /// Smallest |pre-activation| across every relu input in the net.
    /// Gradient checking by finite differences is only valid when this
    /// clears the step size, since the loss is not differentiable at the
    /// kink.
    pub fn min_abs_preactivation(&self) -> f64 {
        [&self.pre_3d_1, &self.pre_3d_2, &self.pre_2d_1, &self.pre_2d_2, &self.pre_fc_1]
            .into_iter()
            .flat_map(|t| t.data())
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min)
    }
}

fn stack_history(history: &HeatMapHistory) -> Result<Tensor> {
    let padded = pad_history(history);
    let (h, w) = (history.feat_h, history.feat_w);
    let mut data = Vec::with_capacity(3 * h * w);
    for m in &padded {
        data.extend_from_slice(m.values());
    }
    Tensor::new(&[3, 1, h, w], data)
}

/// Runs the net on a (padded) history, keeping every intermediate needed
/// by `masknet_loss_and_grads`.
pub fn masknet_forward_cached(history: &HeatMapHistory, net: &MaskNet) -> Result<MaskForward> {
    let input = stack_history(history)?;
    let (h, w) = (history.feat_h, history.feat_w);

    let pre_3d_1 = conv3d_forward(&input, &net.conv3d_1)?;
    let act_3d_1 = relu_forward(&pre_3d_1);
    let pre_3d_2 = conv3d_forward(&act_3d_1, &net.conv3d_2)?;
    let act_3d_2 = relu_forward(&pre_3d_2);
    // T has collapsed to 1; drop the temporal axis for the 2-D tail.
    let c = act_3d_2.dims()[1];
    let flat = Tensor::new(&[c, h, w], act_3d_2.data().to_vec())?;

    let pre_2d_1 = conv2d_forward(&flat, &net.conv2d_1)?;
    let act_2d_1 = relu_forward(&pre_2d_1);
    let pre_2d_2 = conv2d_forward(&act_2d_1, &net.conv2d_2)?;
    let act_2d_2 = relu_forward(&pre_2d_2);
    let pre_fc_1 = conv2d_forward(&act_2d_2, &net.fc_conv_1)?;
    let act_fc_1 = relu_forward(&pre_fc_1);
    let logits = conv2d_forward(&act_fc_1, &net.fc_conv_2)?;
    let softmax = pixel_softmax_forward(&logits)?;

    // Channel order (background, foreground), as in the RPN score head.
    let probs = MaskProbabilities::new(h, w, softmax.plane(1).to_vec())?;
    Ok(MaskForward {
        probs,
        input,
        pre_3d_1,
        act_3d_1,
        pre_3d_2,
        act_3d_2,
        pre_2d_1,
        act_2d_1,
        pre_2d_2,
        act_2d_2,
        pre_fc_1,
        act_fc_1,
    })
}

/// Forward pass without the training cache.
pub fn masknet_forward(history: &HeatMapHistory, net: &MaskNet) -> Result<MaskProbabilities> {
    Ok(masknet_forward_cached(history, net)?.probs)
}

/// Per-pixel cross-entropy against a binary label mask, averaged over all
/// M anchor points, probabilities floored at 1e-12.
pub fn loss_mask(probs: &MaskProbabilities, label: &AnchorMask) -> Result<f64> {
    if probs.feat_h != label.feat_h || probs.feat_w != label.feat_w {
        return Err(Error::shape(
            "loss_mask",
            alloc::format!(
                "probs {}x{} vs label {}x{}",
                probs.feat_h, probs.feat_w, label.feat_h, label.feat_w
            ),
        ));
    }
    let m = probs.values().len() as f64;
    let mut sum = 0.0;
    for (&p, &b) in probs.values().iter().zip(label.bits()) {
        let true_prob = if b == 1 { p } else { 1.0 - p };
        sum -= libm::log(true_prob.max(PROB_FLOOR));
    }
    Ok(sum / m)
}

/// Loss plus parameter gradients through the whole net, tape ordered as
/// `MaskNet::layers`.
pub fn masknet_loss_and_grads(
    fwd: &MaskForward,
    net: &MaskNet,
    label: &AnchorMask,
) -> Result<(f64, GradientTape)> {
    let loss = loss_mask(&fwd.probs, label)?;
    let (h, w) = (fwd.probs.feat_h, fwd.probs.feat_w);
    let hw = h * w;
    let inv_m = 1.0 / hw as f64;

    // Same floored softmax cross-entropy gradient as the RPN score head:
    // d/d fg_logit = (p - 1{label==1}) / M, background the negation.
    let mut d_logits = vec![0.0; 2 * hw];
    for (i, (&p, &b)) in fwd.probs.values().iter().zip(label.bits()).enumerate() {
        let true_prob = if b == 1 { p } else { 1.0 - p };
        if true_prob < PROB_FLOOR {
            continue;
        }
        let g = (p - b as f64) * inv_m;
        d_logits[hw + i] = g;
        d_logits[i] = -g;
    }
    let d_logits = Tensor::new(&[2, h, w], d_logits)?;

    let (g_fc2, d) = conv2d_backward(&fwd.act_fc_1, &net.fc_conv_2, &d_logits)?;
    let d = relu_backward(&fwd.pre_fc_1, &d)?;
    let (g_fc1, d) = conv2d_backward(&fwd.act_2d_2, &net.fc_conv_1, &d)?;
    let d = relu_backward(&fwd.pre_2d_2, &d)?;
    let (g_2d2, d) = conv2d_backward(&fwd.act_2d_1, &net.conv2d_2, &d)?;
    let d = relu_backward(&fwd.pre_2d_1, &d)?;
    let c = fwd.act_3d_2.dims()[1];
    let flat = Tensor::new(&[c, h, w], fwd.act_3d_2.data().to_vec())?;
    let (g_2d1, d) = conv2d_backward(&flat, &net.conv2d_1, &d)?;
    // Restore the temporal axis for the 3-D tail.
    let d = Tensor::new(&[1, c, h, w], d.into_data())?;
    let d = relu_backward(&fwd.pre_3d_2, &d)?;
    let (g_3d2, d) = conv3d_backward(&fwd.act_3d_1, &net.conv3d_2, &d)?;
    let d = relu_backward(&fwd.pre_3d_1, &d)?;
    let (g_3d1, _) = conv3d_backward(&fwd.input, &net.conv3d_1, &d)?;

    let tape = GradientTape { layers: vec![g_3d1, g_3d2, g_2d1, g_2d2, g_fc1, g_fc2] };
    Ok((loss, tape))
}

/// Stage-1 inference: forward, threshold at `mask_thresh`, and (when
/// fusion is on and a previous heat map exists) OR in the last frame's
/// support.
pub fn predict_mask(
    history: &HeatMapHistory,
    net: &MaskNet,
    mask_thresh: f64,
    fusion: bool,
) -> Result<AnchorMask> {
    let probs = masknet_forward(history, net)?;
    let mask = threshold_probs(&probs, mask_thresh)?;
    match (fusion, history.last()) {
        (true, Some(last)) => fuse_with_last(&mask, last),
        _ => Ok(mask),
    }
}
