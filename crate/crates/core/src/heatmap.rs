//! IoU heat maps over anchor points, binary anchor masks, mask fusion,
//! and feature-map gating.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{iou, AnchorGrid, BBox};
use crate::tensor::Tensor;

/// Per-anchor-point maximum IoU against a set of reference boxes, with
/// sub-threshold values forced to exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct IouHeatMap {
    pub feat_h: usize,
    pub feat_w: usize,
    values: Vec<f64>,
}

impl IouHeatMap {
    pub fn new(feat_h: usize, feat_w: usize, values: Vec<f64>) -> Result<Self> {
        if feat_h == 0 || feat_w == 0 || values.len() != feat_h * feat_w {
            return Err(Error::shape(
                "heat map",
                format!("{} values for {feat_h}x{feat_w} map", values.len()),
            ));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("heat map", "values must lie in [0, 1]".into()));
        }
        Ok(IouHeatMap { feat_h, feat_w, values })
    }

    pub fn zeros(feat_h: usize, feat_w: usize) -> Self {
        IouHeatMap { feat_h, feat_w, values: vec![0.0; feat_h * feat_w] }
    }

    pub fn ones(feat_h: usize, feat_w: usize) -> Self {
        IouHeatMap { feat_h, feat_w, values: vec![1.0; feat_h * feat_w] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Strictly 0/1 map over anchor points.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorMask {
    pub feat_h: usize,
    pub feat_w: usize,
    bits: Vec<u8>,
}

impl AnchorMask {
    pub fn new(feat_h: usize, feat_w: usize, bits: Vec<u8>) -> Result<Self> {
        if feat_h == 0 || feat_w == 0 || bits.len() != feat_h * feat_w {
            return Err(Error::shape(
                "anchor mask",
                format!("{} bits for {feat_h}x{feat_w} mask", bits.len()),
            ));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("anchor mask", "bits must be 0 or 1".into()));
        }
        Ok(AnchorMask { feat_h, feat_w, bits })
    }

    pub fn zeros(feat_h: usize, feat_w: usize) -> Self {
        AnchorMask { feat_h, feat_w, bits: vec![0; feat_h * feat_w] }
    }

    pub fn ones(feat_h: usize, feat_w: usize) -> Self {
        AnchorMask { feat_h, feat_w, bits: vec![1; feat_h * feat_w] }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}

/// Per-anchor-point foreground confidence in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskProbabilities {
    pub feat_h: usize,
    pub feat_w: usize,
    values: Vec<f64>,
}

impl MaskProbabilities {
    pub fn new(feat_h: usize, feat_w: usize, values: Vec<f64>) -> Result<Self> {
        if feat_h == 0 || feat_w == 0 || values.len() != feat_h * feat_w {
            return Err(Error::shape(
                "mask probabilities",
                format!("{} values for {feat_h}x{feat_w} map", values.len()),
            ));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "mask probabilities",
                "values must lie in [0, 1]".into(),
            ));
        }
        Ok(MaskProbabilities { feat_h, feat_w, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Rolling window of the last (up to) three heat maps, oldest first, with
/// strictly increasing frame indices and fixed extents.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMapHistory {
    pub feat_h: usize,
    pub feat_w: usize,
    entries: Vec<(usize, IouHeatMap)>,
}

pub const HISTORY_DEPTH: usize = 3;

impl HeatMapHistory {
    pub fn new(feat_h: usize, feat_w: usize) -> Self {
        HeatMapHistory { feat_h, feat_w, entries: Vec::new() }
    }

    /// Appends a frame's heat map, evicting the oldest beyond the depth
    /// bound. Frame indices must strictly increase.
    pub fn push(&mut self, frame_index: usize, map: IouHeatMap) -> Result<()> {
        if map.feat_h != self.feat_h || map.feat_w != self.feat_w {
            return Err(Error::shape(
                "heat map history",
                format!(
                    "map extent {}x{} does not match history {}x{}",
                    map.feat_h, map.feat_w, self.feat_h, self.feat_w
                ),
            ));
        }
        if let Some(&(last, _)) = self.entries.last() {
            if frame_index <= last {
                return Err(Error::invalid(
                    "heat map history",
                    format!("frame index {frame_index} not after {last}"),
                ));
            }
        }
        self.entries.push((frame_index, map));
        if self.entries.len() > HISTORY_DEPTH {
            self.entries.remove(0);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Maps oldest first.
    pub fn maps(&self) -> impl Iterator<Item = &IouHeatMap> {
        self.entries.iter().map(|(_, m)| m)
    }

    pub fn last(&self) -> Option<&IouHeatMap> {
        self.entries.last().map(|(_, m)| m)
    }

    pub fn frame_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }
}

/// Heat map over the grid: each point takes the maximum IoU between any of
/// its k anchors and any input box; values below `threshold` become
/// exactly 0. An empty box list gives an all-zero map.
pub fn build_heatmap(boxes: &[BBox], grid: &AnchorGrid, threshold: f64) -> Result<IouHeatMap> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::invalid(
            "build_heatmap",
            format!("threshold {threshold} outside [0, 1)"),
        ));
    }
    if boxes
        .iter()
        .any(|b| ![b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite()))
    {
        return Err(Error::NonFinite { context: "build_heatmap" });
    }
    let k = grid.k();
    let mut values = vec![0.0; grid.grid_h * grid.grid_w];
    for (point, v) in values.iter_mut().enumerate() {
        let mut best = 0.0f64;
        for anchor in &grid.anchors()[point * k..(point + 1) * k] {
            for b in boxes {
                best = best.max(iou(anchor, b));
            }
        }
        *v = if best < threshold { 0.0 } else { best };
    }
    Ok(IouHeatMap { feat_h: grid.grid_h, feat_w: grid.grid_w, values })
}

/// Binary support of a heat map: 1 wherever the value is positive.
pub fn binarize(map: &IouHeatMap) -> AnchorMask {
    AnchorMask {
        feat_h: map.feat_h,
        feat_w: map.feat_w,
        bits: map.values.iter().map(|&v| (v > 0.0) as u8).collect(),
    }
}

/// Thresholds foreground confidences into a mask; the boundary is
/// inclusive (prob == p0 maps to 1). `p0` must lie strictly inside (0, 1).
pub fn threshold_probs(probs: &MaskProbabilities, p0: f64) -> Result<AnchorMask> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::invalid(
            "threshold_probs",
            format!("threshold {p0} outside (0, 1)"),
        ));
    }
    Ok(AnchorMask {
        feat_h: probs.feat_h,
        feat_w: probs.feat_w,
        bits: probs.values.iter().map(|&v| (v >= p0) as u8).collect(),
    })
}

/// Widens a predicted mask with the previous frame's heat-map support:
/// elementwise OR with `binarize(last)`. Never drops a 1 present in
/// either operand.
pub fn fuse_with_last(predicted: &AnchorMask, last: &IouHeatMap) -> Result<AnchorMask> {
    if predicted.feat_h != last.feat_h || predicted.feat_w != last.feat_w {
        return Err(Error::shape(
            "fuse_with_last",
            format!(
                "mask {}x{} vs heat map {}x{}",
                predicted.feat_h, predicted.feat_w, last.feat_h, last.feat_w
            ),
        ));
    }
    let bits = predicted
        .bits
        .iter()
        .zip(&last.values)
        .map(|(&m, &v)| (m == 1 || v > 0.0) as u8)
        .collect();
    Ok(AnchorMask { feat_h: predicted.feat_h, feat_w: predicted.feat_w, bits })
}

/// Gates a `[C, H, W]` feature map: every channel is multiplied
/// elementwise by the mask, so masked-out positions are exactly 0 in all
/// channels and kept positions are bit-identical to the input.
pub fn apply_mask(features: &Tensor, mask: &AnchorMask) -> Result<Tensor> {
    let d = features.dims();
    if d.len() != 3 || d[1] != mask.feat_h || d[2] != mask.feat_w {
        return Err(Error::shape(
            "apply_mask",
            format!("features {d:?} vs mask {}x{}", mask.feat_h, mask.feat_w),
        ));
    }
    let hw = mask.bits.len();
    let mut out = features.data().to_vec();
    for c in 0..d[0] {
        for (o, &b) in out[c * hw..(c + 1) * hw].iter_mut().zip(&mask.bits) {
            *o *= b as f64;
        }
    }
    Tensor::new(d, out)
}
