//! RPN head: per-anchor scoring and box regression over (optionally
//! gated) features, anchor labeling with the -1/invalid convention and
//! 3:1 negative sampling, the score/regression losses, and proposal
//! generation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv2d_backward, conv2d_forward, ConvLayer, GradientTape};
use crate::error::{Error, Result};
use crate::geometry::{decode, encode, iou, nms, smooth_l1, smooth_l1_grad, AnchorGrid, BBox, BoxDeltas, Proposal};
use crate::heatmap::AnchorMask;
use crate::nn::{relu_backward, relu_forward};
use crate::tensor::Tensor;

/// Probabilities are floored here before any log in the losses.
pub const PROB_FLOOR: f64 = 1e-12;

/// Scoring/regression head: one shared 3x3 conv, then parallel 1x1 convs
/// emitting 2k score logits (background, foreground per anchor) and 4k
/// box deltas (tx, ty, tw, th per anchor).
#[derive(Debug, Clone, PartialEq)]
pub struct RpnHead {
    pub conv_shared: ConvLayer,
    pub conv_score: ConvLayer,
    pub conv_delta: ConvLayer,
}

impl RpnHead {
    pub fn new(channels: usize, k: usize, rng: &mut impl Rng) -> Self {
        RpnHead {
            conv_shared: ConvLayer::new_2d(channels, channels, 3, 1, 1, rng),
            conv_score: ConvLayer::new_2d(channels, 2 * k, 1, 1, 0, rng),
            conv_delta: ConvLayer::new_2d(channels, 4 * k, 1, 1, 0, rng),
        }
    }

    pub fn k(&self) -> usize {
        self.conv_score.out_c() / 2
    }
}

/// Per-anchor foreground probabilities and regression outputs, indexed by
/// anchor (point-major, then anchor-within-point).
#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    pub feat_h: usize,
    pub feat_w: usize,
    pub k: usize,
    pub scores: Vec<f64>,
    pub deltas: Vec<BoxDeltas>,
}

/// Forward activations retained for the backward pass.
pub struct RpnForward {
    pub output: RpnOutput,
    input: Tensor,
    shared_pre: Tensor,
    shared_act: Tensor,
    score_logits: Tensor,
}

impl RpnForward {
    /// Smallest |pre-activation| feeding the shared relu. Gradient
    /// checking by finite differences is only valid when this clears the
    /// step size, since the loss is not differentiable at the kink.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.shared_pre
            .data()
            .iter()
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min)
    }
}

fn check_features(features: &Tensor, head: &RpnHead, grid: &AnchorGrid) -> Result<()> {
    let d = features.dims();
    if d.len() != 3 || d[1] != grid.grid_h || d[2] != grid.grid_w {
        return Err(Error::shape(
            "rpn_forward",
            format!("features {d:?} vs grid {}x{}", grid.grid_h, grid.grid_w),
        ));
    }
    if d[0] != head.conv_shared.in_c() {
        return Err(Error::shape(
            "rpn_forward",
            format!("{} feature channels, head expects {}", d[0], head.conv_shared.in_c()),
        ));
    }
    if head.k() != grid.k()
        || head.conv_score.out_c() != 2 * grid.k()
        || head.conv_delta.out_c() != 4 * grid.k()
    {
        return Err(Error::shape(
            "rpn_forward",
            format!("head emits {}k scores, grid has k={}", head.k(), grid.k()),
        ));
    }
    Ok(())
}

/// Runs the head and keeps every intermediate needed by
/// `rpn_loss_and_grads`.
pub fn rpn_forward_cached(
    features: &Tensor,
    head: &RpnHead,
    grid: &AnchorGrid,
) -> Result<RpnForward> {
    check_features(features, head, grid)?;
    let shared_pre = conv2d_forward(features, &head.conv_shared)?;
    let shared_act = relu_forward(&shared_pre);
    let score_logits = conv2d_forward(&shared_act, &head.conv_score)?;
    let delta_raw = conv2d_forward(&shared_act, &head.conv_delta)?;

    let (h, w, k) = (grid.grid_h, grid.grid_w, grid.k());
    let hw = h * w;
    let sl = score_logits.data();
    let dl = delta_raw.data();
    let mut scores = vec![0.0; hw * k];
    let mut deltas = vec![BoxDeltas::ZERO; hw * k];
    for p in 0..hw {
        for j in 0..k {
            let bg = sl[(2 * j) * hw + p];
            let fg = sl[(2 * j + 1) * hw + p];
            let m = bg.max(fg);
            let eb = libm::exp(bg - m);
            let ef = libm::exp(fg - m);
            scores[p * k + j] = ef / (eb + ef);
            deltas[p * k + j] = BoxDeltas {
                tx: dl[(4 * j) * hw + p],
                ty: dl[(4 * j + 1) * hw + p],
                tw: dl[(4 * j + 2) * hw + p],
                th: dl[(4 * j + 3) * hw + p],
            };
        }
    }
    Ok(RpnForward {
        output: RpnOutput { feat_h: h, feat_w: w, k, scores, deltas },
        input: features.clone(),
        shared_pre,
        shared_act,
        score_logits,
    })
}

/// Forward pass without the training cache.
pub fn rpn_forward(features: &Tensor, head: &RpnHead, grid: &AnchorGrid) -> Result<RpnOutput> {
    Ok(rpn_forward_cached(features, head, grid)?.output)
}

/// Anchor supervision: 1 positive, 0 negative, -1 invalid (ignored by
/// both losses). Regression targets exist exactly for positives.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLabels {
    pub labels: Vec<i8>,
    pub targets: Vec<Option<BoxDeltas>>,
    pub n_valid: usize,
}

/// Labels every anchor against one ground-truth box: anchors with
/// IoU >= `pos_iou` are positive, and the single max-IoU anchor is forced
/// positive so at least one always exists; among anchors with
/// IoU < `neg_iou`, exactly min(neg_ratio * positives, candidates) are
/// kept as negatives by seeded sampling without replacement; everything
/// else is invalid (-1).
pub fn label_anchors(
    grid: &AnchorGrid,
    gt: &BBox,
    pos_iou: f64,
    neg_iou: f64,
    neg_ratio: usize,
    seed: u64,
) -> Result<AnchorLabels> {
    if gt.width() <= 0.0 || gt.height() <= 0.0 {
        return Err(Error::invalid("label_anchors", "degenerate ground-truth box".into()));
    }
    if !(0.0 <= neg_iou && neg_iou < pos_iou && pos_iou <= 1.0) {
        return Err(Error::invalid(
            "label_anchors",
            format!("need 0 <= neg_iou < pos_iou <= 1, got {neg_iou} and {pos_iou}"),
        ));
    }
    if neg_ratio == 0 {
        return Err(Error::invalid("label_anchors", "neg_ratio must be at least 1".into()));
    }
    let n = grid.len();
    let mut labels = vec![-1i8; n];
    let mut targets = vec![None; n];
    let ious: Vec<f64> = grid.anchors().iter().map(|a| iou(a, gt)).collect();
    let mut best = 0usize;
    for (i, &v) in ious.iter().enumerate() {
        if v > ious[best] {
            best = i;
        }
    }
    let mut n_pos = 0;
    for (i, &v) in ious.iter().enumerate() {
        if v >= pos_iou || i == best {
            labels[i] = 1;
            targets[i] = Some(encode(&grid.anchors()[i], gt)?);
            n_pos += 1;
        }
    }
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| labels[i] != 1 && ious[i] < neg_iou)
        .collect();
    let want = (neg_ratio * n_pos).min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..want {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
        labels[candidates[i]] = 0;
    }
    let n_valid = n_pos + want;
    Ok(AnchorLabels { labels, targets, n_valid })
}

fn check_labels(out: &RpnOutput, labels: &AnchorLabels, context: &'static str) -> Result<()> {
    if labels.labels.len() != out.scores.len() || labels.targets.len() != out.scores.len() {
        return Err(Error::shape(
            context,
            format!("{} labels for {} anchors", labels.labels.len(), out.scores.len()),
        ));
    }
    if labels.n_valid == 0 {
        return Err(Error::invalid(context, "no valid anchors".into()));
    }
    Ok(())
}

/// Cross-entropy over valid anchors, averaged by the valid count:
/// -(1/n) * sum of log(probability of the true class), probabilities
/// floored at 1e-12. Invalid (-1) anchors contribute nothing.
pub fn loss_rpn_scores(out: &RpnOutput, labels: &AnchorLabels) -> Result<f64> {
    check_labels(out, labels, "loss_rpn_scores")?;
    let mut sum = 0.0;
    for (i, &l) in labels.labels.iter().enumerate() {
        let p = match l {
            1 => out.scores[i],
            0 => 1.0 - out.scores[i],
            _ => continue,
        };
        sum -= libm::log(p.max(PROB_FLOOR));
    }
    Ok(sum / labels.n_valid as f64)
}

/// Which count divides the regression loss; the valid-anchor count is the
/// default, sharing one n with the score loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegDivisor {
    #[default]
    ValidCount,
    PositiveCount,
}

/// Smooth-L1 over the four delta components of positive anchors, summed
/// and divided by the chosen count. Zero when there are no positives.
pub fn loss_rpn_reg(out: &RpnOutput, labels: &AnchorLabels, divisor: RegDivisor) -> Result<f64> {
    check_labels(out, labels, "loss_rpn_reg")?;
    let mut sum = 0.0;
    let mut n_pos = 0usize;
    for (i, &l) in labels.labels.iter().enumerate() {
        if l != 1 {
            continue;
        }
        n_pos += 1;
        let t = labels.targets[i].ok_or_else(|| {
            Error::invalid("loss_rpn_reg", "positive anchor without target".into())
        })?;
        let d = out.deltas[i];
        sum += smooth_l1(d.tx - t.tx)
            + smooth_l1(d.ty - t.ty)
            + smooth_l1(d.tw - t.tw)
            + smooth_l1(d.th - t.th);
    }
    let n = match divisor {
        RegDivisor::ValidCount => labels.n_valid,
        RegDivisor::PositiveCount => n_pos,
    };
    if n == 0 {
        return Ok(0.0);
    }
    Ok(sum / n as f64)
}

/// Total loss: plain unweighted sum of the two heads.
pub fn loss_rpn_total(scores_loss: f64, reg_loss: f64) -> f64 {
    scores_loss + reg_loss
}

/// Loss of both heads plus gradients through the whole head, returned as
/// (scores_loss, reg_loss, tape over [shared, score, delta] layers,
/// gradient w.r.t. the input features).
pub fn rpn_loss_and_grads(
    fwd: &RpnForward,
    head: &RpnHead,
    labels: &AnchorLabels,
    divisor: RegDivisor,
) -> Result<(f64, f64, GradientTape, Tensor)> {
    let out = &fwd.output;
    let scores_loss = loss_rpn_scores(out, labels)?;
    let reg_loss = loss_rpn_reg(out, labels, divisor)?;

    let (hw, k) = (out.feat_h * out.feat_w, out.k);
    let inv_n = 1.0 / labels.n_valid as f64;
    // Score branch: d/d logits of the floored cross-entropy. Wherever the
    // true-class probability sits above the floor this is the usual
    // (softmax - onehot) / n; at floored anchors the clamp kills the
    // gradient.
    let mut d_score = vec![0.0; 2 * k * hw];
    for (i, &l) in labels.labels.iter().enumerate() {
        let (p, j) = (i / k, i % k);
        let fg = out.scores[i];
        let true_prob = match l {
            1 => fg,
            0 => 1.0 - fg,
            _ => continue,
        };
        if true_prob < PROB_FLOOR {
            continue;
        }
        // d loss / d fg_logit = (fg - 1{label==1}) / n; the background
        // logit gets the negation (two-way softmax).
        let g = (fg - if l == 1 { 1.0 } else { 0.0 }) * inv_n;
        d_score[(2 * j + 1) * hw + p] = g;
        d_score[(2 * j) * hw + p] = -g;
    }
    // Regression branch: smooth-L1 derivative at positive anchors only.
    let n_pos = labels.labels.iter().filter(|&&l| l == 1).count();
    let reg_n = match divisor {
        RegDivisor::ValidCount => labels.n_valid,
        RegDivisor::PositiveCount => n_pos,
    };
    let mut d_delta = vec![0.0; 4 * k * hw];
    if reg_n > 0 {
        let inv_reg = 1.0 / reg_n as f64;
        for (i, &l) in labels.labels.iter().enumerate() {
            if l != 1 {
                continue;
            }
            let t = labels.targets[i].expect("checked by loss_rpn_reg");
            let d = out.deltas[i];
            let (p, j) = (i / k, i % k);
            d_delta[(4 * j) * hw + p] = smooth_l1_grad(d.tx - t.tx) * inv_reg;
            d_delta[(4 * j + 1) * hw + p] = smooth_l1_grad(d.ty - t.ty) * inv_reg;
            d_delta[(4 * j + 2) * hw + p] = smooth_l1_grad(d.tw - t.tw) * inv_reg;
            d_delta[(4 * j + 3) * hw + p] = smooth_l1_grad(d.th - t.th) * inv_reg;
        }
    }

    let d_score = Tensor::new(fwd.score_logits.dims(), d_score)?;
    let d_delta = Tensor::new(&[4 * k, out.feat_h, out.feat_w], d_delta)?;
    let (g_score, d_act_s) = conv2d_backward(&fwd.shared_act, &head.conv_score, &d_score)?;
    let (g_delta, d_act_d) = conv2d_backward(&fwd.shared_act, &head.conv_delta, &d_delta)?;
    let mut d_act = d_act_s;
    for (a, b) in d_act.data_mut().iter_mut().zip(d_act_d.data()) {
        *a += b;
    }
    let d_pre = relu_backward(&fwd.shared_pre, &d_act)?;
    let (g_shared, d_input) = conv2d_backward(&fwd.input, &head.conv_shared, &d_pre)?;
    let tape = GradientTape { layers: vec![g_shared, g_score, g_delta] };
    Ok((scores_loss, reg_loss, tape, d_input))
}

/// Decodes every anchor the mask admits (all of them when `mask` is
/// absent), attaches scores, and runs NMS. An all-ones mask is
/// bit-identical to no mask.
pub fn propose(
    out: &RpnOutput,
    grid: &AnchorGrid,
    mask: Option<&AnchorMask>,
    nms_iou: f64,
    keep: usize,
) -> Result<Vec<Proposal>> {
    if out.scores.len() != grid.len() || out.k != grid.k() {
        return Err(Error::shape(
            "propose",
            format!("{} outputs vs {} anchors", out.scores.len(), grid.len()),
        ));
    }
    if let Some(m) = mask {
        if m.feat_h != out.feat_h || m.feat_w != out.feat_w {
            return Err(Error::shape(
                "propose",
                format!("mask {}x{} vs grid {}x{}", m.feat_h, m.feat_w, out.feat_h, out.feat_w),
            ));
        }
    }
    let k = out.k;
    let mut candidates = Vec::with_capacity(out.scores.len());
    for i in 0..out.scores.len() {
        if let Some(m) = mask {
            if m.bits()[i / k] == 0 {
                continue;
            }
        }
        candidates.push(Proposal {
            bbox: decode(&grid.anchors()[i], &out.deltas[i])?,
            score: out.scores[i],
            anchor_index: i,
        });
    }
    nms(&candidates, nms_iou, keep)
}
