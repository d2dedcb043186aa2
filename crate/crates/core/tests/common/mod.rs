//! Shared oracles for the integration suites: a central-finite-difference
//! gradient checker and brute-force geometry references.

#![allow(dead_code)]

pub mod gradchecks;

use amrpn_core::conv::{ConvLayer, GradientTape};
use amrpn_core::geometry::{iou, AnchorGrid, BBox, Proposal};
use amrpn_core::tensor::Tensor;

pub const FD_H: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with an absolute floor so near-zero pairs compare
/// sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Anything whose trainable parameters are an ordered list of conv
/// layers.
pub trait ParamNet {
    fn params_mut(&mut self) -> Vec<&mut ConvLayer>;
}

impl ParamNet for ConvLayer {
    fn params_mut(&mut self) -> Vec<&mut ConvLayer> {
        vec![self]
    }
}

fn read_param(net: &mut impl ParamNet, li: usize, pi: usize) -> f64 {
    let mut ls = net.params_mut();
    let l = &mut ls[li];
    let wlen = l.weights.len();
    if pi < wlen {
        l.weights.data()[pi]
    } else {
        l.bias[pi - wlen]
    }
}

fn write_param(net: &mut impl ParamNet, li: usize, pi: usize, v: f64) {
    let mut ls = net.params_mut();
    let l = &mut ls[li];
    let wlen = l.weights.len();
    if pi < wlen {
        l.weights.data_mut()[pi] = v;
    } else {
        l.bias[pi - wlen] = v;
    }
}

/// Central finite differences over every weight and bias of every layer,
/// compared against an analytic tape (ordered like `params_mut`).
/// Returns the max relative error.
pub fn gradcheck_params<N: ParamNet>(
    net: &mut N,
    analytic: &GradientTape,
    loss: impl Fn(&N) -> f64,
) -> f64 {
    let n_layers = net.params_mut().len();
    assert_eq!(n_layers, analytic.layers.len(), "tape arity");
    let mut max_err: f64 = 0.0;
    for li in 0..n_layers {
        let (wlen, blen) = {
            let ls = net.params_mut();
            (ls[li].weights.len(), ls[li].bias.len())
        };
        for pi in 0..wlen + blen {
            let orig = read_param(net, li, pi);
            write_param(net, li, pi, orig + FD_H);
            let lp = loss(net);
            write_param(net, li, pi, orig - FD_H);
            let lm = loss(net);
            write_param(net, li, pi, orig);
            let numeric = (lp - lm) / (2.0 * FD_H);
            let a = &analytic.layers[li];
            let exact = if pi < wlen { a.d_weights.data()[pi] } else { a.d_bias[pi - wlen] };
            max_err = max_err.max(rel_err(exact, numeric));
        }
    }
    max_err
}

/// Central finite differences over every input element against an
/// analytic input-gradient tensor. Returns the max relative error.
pub fn gradcheck_input(
    input: &mut Tensor,
    analytic: &Tensor,
    loss: impl Fn(&Tensor) -> f64,
) -> f64 {
    assert_eq!(input.dims(), analytic.dims(), "input grad dims");
    let mut max_err: f64 = 0.0;
    for i in 0..input.len() {
        let orig = input.data()[i];
        input.data_mut()[i] = orig + FD_H;
        let lp = loss(input);
        input.data_mut()[i] = orig - FD_H;
        let lm = loss(input);
        input.data_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * FD_H);
        max_err = max_err.max(rel_err(analytic.data()[i], numeric));
    }
    max_err
}

/// Pixel-counting IoU for integer-coordinate boxes: exact because unit
/// cells tile both boxes perfectly.
pub fn iou_by_rasterization(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.x1 as i64, a.y1 as i64, a.x2 as i64, a.y2 as i64);
    let (bx1, by1, bx2, by2) = (b.x1 as i64, b.y1 as i64, b.x2 as i64, b.y2 as i64);
    let x_lo = ax1.min(bx1);
    let x_hi = ax2.max(bx2);
    let y_lo = ay1.min(by1);
    let y_hi = ay2.max(by2);
    let mut inter = 0i64;
    let mut union = 0i64;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let in_a = x >= ax1 && x < ax2 && y >= ay1 && y < ay2;
            let in_b = x >= bx1 && x < bx2 && y >= by1 && y < by2;
            inter += (in_a && in_b) as i64;
            union += (in_a || in_b) as i64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Quadratic reference NMS: repeatedly scan for the best unsuppressed
/// proposal (highest score, then lowest anchor index) and knock out
/// everything overlapping it strictly above the threshold.
pub fn nms_reference(proposals: &[Proposal], thresh: f64, keep: usize) -> Vec<Proposal> {
    let mut alive = vec![true; proposals.len()];
    let mut kept = Vec::new();
    while kept.len() < keep {
        let mut best: Option<usize> = None;
        for (i, p) in proposals.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(j) => {
                    let q = &proposals[j];
                    if p.score > q.score
                        || (p.score == q.score && p.anchor_index < q.anchor_index)
                    {
                        Some(i)
                    } else {
                        Some(j)
                    }
                }
            };
        }
        let Some(b) = best else { break };
        alive[b] = false;
        kept.push(proposals[b]);
        for (i, p) in proposals.iter().enumerate() {
            if alive[i] && iou(&p.bbox, &proposals[b].bbox) > thresh {
                alive[i] = false;
            }
        }
    }
    kept
}

/// Exhaustive heat-map reference built box-major: first the max IoU seen
/// by every individual anchor, then a per-grid-point reduction over each
/// point's k anchors, thresholding last. Deliberately a different loop
/// structure from the production point-major routine.
pub fn heatmap_reference(boxes: &[BBox], grid: &AnchorGrid, threshold: f64) -> Vec<f64> {
    let mut per_anchor = vec![0.0f64; grid.len()];
    for b in boxes {
        for (best, anchor) in per_anchor.iter_mut().zip(grid.anchors()) {
            let v = iou(anchor, b);
            if v > *best {
                *best = v;
            }
        }
    }
    let mut out = vec![0.0f64; grid.grid_h * grid.grid_w];
    for (ai, &v) in per_anchor.iter().enumerate() {
        let p = ai / grid.k();
        if v > out[p] {
            out[p] = v;
        }
    }
    for v in &mut out {
        if *v < threshold {
            *v = 0.0;
        }
    }
    out
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}
