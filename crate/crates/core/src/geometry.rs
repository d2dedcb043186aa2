//! Boxes, the anchor grid, IoU, box regression targets, and NMS.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Frame edge length in pixels; every frame entering the pipeline is
/// resized to this square extent, and decoded boxes are clipped to it.
pub const FRAME_EXTENT: f64 = 224.0;

/// Axis-aligned box in corner form. Degenerate (zero-area) boxes are legal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

/// Intersection over union. Non-overlapping pairs score 0, as does any
/// pair whose union has no area (two degenerate boxes).
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Box regression offsets relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDeltas {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDeltas {
    pub const ZERO: BoxDeltas = BoxDeltas { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 };
}

/// Offsets that map `anchor` onto `target`: center shifts normalized by
/// the anchor extents and log extent ratios. Both boxes need positive
/// width and height.
pub fn encode(anchor: &BBox, target: &BBox) -> Result<BoxDeltas> {
    if anchor.width() <= 0.0 || anchor.height() <= 0.0 {
        return Err(Error::invalid("encode", "anchor has non-positive extent".into()));
    }
    if target.width() <= 0.0 || target.height() <= 0.0 {
        return Err(Error::invalid("encode", "target has non-positive extent".into()));
    }
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    Ok(BoxDeltas {
        tx: (tcx - acx) / anchor.width(),
        ty: (tcy - acy) / anchor.height(),
        tw: libm::log(target.width() / anchor.width()),
        th: libm::log(target.height() / anchor.height()),
    })
}

/// Applies offsets to an anchor. Log-extent terms are clamped to [-10, 10]
/// before exponentiation so runaway regression outputs cannot overflow,
/// and the result is clipped to the frame.
pub fn decode(anchor: &BBox, deltas: &BoxDeltas) -> Result<BBox> {
    if anchor.width() <= 0.0 || anchor.height() <= 0.0 {
        return Err(Error::invalid("decode", "anchor has non-positive extent".into()));
    }
    if ![deltas.tx, deltas.ty, deltas.tw, deltas.th].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "decode" });
    }
    let (acx, acy) = anchor.center();
    let cx = acx + deltas.tx * anchor.width();
    let cy = acy + deltas.ty * anchor.height();
    let w = anchor.width() * libm::exp(deltas.tw.clamp(-10.0, 10.0));
    let h = anchor.height() * libm::exp(deltas.th.clamp(-10.0, 10.0));
    Ok(BBox {
        x1: (cx - w / 2.0).clamp(0.0, FRAME_EXTENT),
        y1: (cy - h / 2.0).clamp(0.0, FRAME_EXTENT),
        x2: (cx + w / 2.0).clamp(0.0, FRAME_EXTENT),
        y2: (cy + h / 2.0).clamp(0.0, FRAME_EXTENT),
    })
}

/// Smooth L1: 0.5 x^2 inside |x| < 1, |x| - 0.5 outside.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Derivative of `smooth_l1`.
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Fixed lattice of anchors over a feature grid. Anchors are laid out
/// row-major over grid cells with the k per-cell shapes contiguous, are
/// centered at (cell + 0.5) * stride, and are deliberately not clipped to
/// the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: f64,
    k: usize,
    anchors: Vec<BBox>,
}

impl AnchorGrid {
    /// Shapes preserve the scale's area across ratios: w = s / sqrt(r),
    /// h = s * sqrt(r), ordered scale-major then ratio.
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        stride: f64,
        scales: &[f64],
        ratios: &[f64],
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::invalid("anchor grid", "empty grid".into()));
        }
        if !(stride.is_finite() && stride > 0.0) {
            return Err(Error::invalid("anchor grid", format!("bad stride {stride}")));
        }
        if scales.is_empty() || ratios.is_empty() {
            return Err(Error::invalid("anchor grid", "scales and ratios must be non-empty".into()));
        }
        if scales.iter().chain(ratios).any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::invalid("anchor grid", "scales and ratios must be positive".into()));
        }
        let mut shapes = Vec::with_capacity(scales.len() * ratios.len());
        for &s in scales {
            for &r in ratios {
                let root = libm::sqrt(r);
                shapes.push((s / root, s * root));
            }
        }
        let mut anchors = Vec::with_capacity(grid_h * grid_w * shapes.len());
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                let cx = (gx as f64 + 0.5) * stride;
                let cy = (gy as f64 + 0.5) * stride;
                for &(w, h) in &shapes {
                    anchors.push(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
                }
            }
        }
        Ok(AnchorGrid {
            grid_h,
            grid_w,
            stride,
            k: shapes.len(),
            anchors,
        })
    }

    /// The grid used throughout: 14x14 cells of stride 16 (a 224-pixel
    /// frame), scales {32, 64, 128}, ratios {0.5, 1, 2}.
    pub fn standard() -> Self {
        AnchorGrid::new(14, 14, 16.0, &[32.0, 64.0, 128.0], &[0.5, 1.0, 2.0])
            .expect("standard grid parameters are valid")
    }

    /// Anchor shapes per cell.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    /// Grid cell (y, x) that anchor `index` belongs to.
    pub fn cell_of(&self, index: usize) -> (usize, usize) {
        let cell = index / self.k;
        (cell / self.grid_w, cell % self.grid_w)
    }
}

/// A scored candidate box tied back to the anchor that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub anchor_index: usize,
}

/// Greedy non-maximum suppression: visit proposals by descending score
/// (ties broken toward the lower anchor index), keep a proposal unless it
/// overlaps an already kept one with IoU strictly above `iou_thresh`,
/// stop after `keep` survivors. Scores must be finite, the threshold in
/// (0, 1], and `keep` at least 1.
pub fn nms(proposals: &[Proposal], iou_thresh: f64, keep: usize) -> Result<Vec<Proposal>> {
    if proposals.iter().any(|p| !p.score.is_finite()) {
        return Err(Error::NonFinite { context: "nms" });
    }
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::invalid("nms", format!("iou threshold {iou_thresh} outside (0, 1]")));
    }
    if keep == 0 {
        return Err(Error::invalid("nms", "keep must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .score
            .partial_cmp(&proposals[a].score)
            .expect("scores checked finite")
            .then(proposals[a].anchor_index.cmp(&proposals[b].anchor_index))
    });
    let mut kept: Vec<Proposal> = Vec::new();
    for &i in &order {
        if kept.len() == keep {
            break;
        }
        let cand = &proposals[i];
        if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) <= iou_thresh) {
            kept.push(*cand);
        }
    }
    Ok(kept)
}
