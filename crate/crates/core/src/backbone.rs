//! Tiny trainable feature extractor: four stages of 3x3 conv + ReLU +
//! 2x2 max-pool, taking a single-channel frame to a stride-16 feature
//! map (224x224 -> C x 14x14).

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::conv::{conv2d_backward, conv2d_forward, ConvLayer, GradientTape, LayerGrads};
use crate::error::{Error, Result};
use crate::nn::{maxpool2_backward, maxpool2_forward, relu_backward, relu_forward};
use crate::tensor::Tensor;

pub const BACKBONE_STAGES: usize = 4;

/// Per-stage output channel widths; the last entry is the feature depth
/// the RPN head sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub channels: [usize; BACKBONE_STAGES],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { channels: [4, 8, 16, 32] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub stages: Vec<ConvLayer>,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.channels.contains(&0) {
            return Err(Error::invalid("backbone", "channel widths must be positive".into()));
        }
        let mut stages = Vec::with_capacity(BACKBONE_STAGES);
        let mut in_c = 1;
        for &out_c in &cfg.channels {
            stages.push(ConvLayer::new_2d(in_c, out_c, 3, 1, 1, rng));
            in_c = out_c;
        }
        Ok(Backbone { stages })
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().expect("backbone has stages").out_c()
    }

    pub fn layers(&self) -> Vec<&ConvLayer> {
        self.stages.iter().collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        self.stages.iter_mut().collect()
    }
}

struct StageCache {
    input: Tensor,
    pre: Tensor,
    argmax: Vec<usize>,
}

/// Forward activations retained for `backbone_backward`.
pub struct BackboneForward {
    pub output: Tensor,
    caches: Vec<StageCache>,
}

/// Runs the extractor on a `[1, H, W]` frame whose extents are divisible
/// by 16, keeping per-stage activations for the backward pass.
pub fn backbone_forward_cached(image: &Tensor, bb: &Backbone) -> Result<BackboneForward> {
    let d = image.dims();
    if d.len() != 3 || d[0] != 1 {
        return Err(Error::shape(
            "backbone",
            format!("expected [1, H, W] frame, got {d:?}"),
        ));
    }
    if d[1] % 16 != 0 || d[2] % 16 != 0 || d[1] < 16 || d[2] < 16 {
        return Err(Error::shape(
            "backbone",
            format!("extents must be positive multiples of 16, got {}x{}", d[1], d[2]),
        ));
    }
    let mut x = image.clone();
    let mut caches = Vec::with_capacity(bb.stages.len());
    for layer in &bb.stages {
        let pre = conv2d_forward(&x, layer)?;
        let act = relu_forward(&pre);
        let (pooled, argmax) = maxpool2_forward(&act)?;
        caches.push(StageCache { input: x, pre, argmax });
        x = pooled;
    }
    Ok(BackboneForward { output: x, caches })
}

/// Forward pass without the training cache.
pub fn backbone_forward(image: &Tensor, bb: &Backbone) -> Result<Tensor> {
    Ok(backbone_forward_cached(image, bb)?.output)
}

/// Parameter gradients for all stages given the upstream gradient on the
/// feature map, tape ordered as `Backbone::stages`.
pub fn backbone_backward(
    fwd: &BackboneForward,
    bb: &Backbone,
    d_out: &Tensor,
) -> Result<GradientTape> {
    fwd.output.same_dims(d_out, "backbone backward")?;
    let mut d = d_out.clone();
    let mut grads: Vec<LayerGrads> = Vec::with_capacity(bb.stages.len());
    for (layer, cache) in bb.stages.iter().zip(&fwd.caches).rev() {
        let d_act = maxpool2_backward(cache.pre.dims(), &cache.argmax, &d)?;
        let d_pre = relu_backward(&cache.pre, &d_act)?;
        let (g, d_in) = conv2d_backward(&cache.input, layer, &d_pre)?;
        grads.push(g);
        d = d_in;
    }
    grads.reverse();
    Ok(GradientTape { layers: grads })
}
