//! Pointwise activations, 2x2 max pooling, per-pixel softmax, and plain SGD.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{ConvLayer, GradientTape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Elementwise max(0, x).
pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.dims(), data).expect("dims unchanged")
}

/// Gradient of relu; zero wherever the forward input was <= 0.
pub fn relu_backward(x: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    x.same_dims(d_out, "relu backward")?;
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.dims(), data)
}

/// 2x2 max pooling with stride 2 over `[C, H, W]`; spatial extents must be
/// even. Returns the pooled tensor and, per output element, the flat index
/// of its source element (ties go to the earlier element in row-major
/// order) for routing gradients back.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let d = x.dims();
    if d.len() != 3 {
        return Err(Error::shape(
            "maxpool2",
            format!("expected [C, H, W] input, got {d:?}"),
        ));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("spatial extents must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    let data = x.data();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let i00 = base + (2 * y) * w + 2 * xo;
                let cand = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                let o = ch * oh * ow + y * ow + xo;
                out[o] = data[best];
                argmax[o] = best;
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, argmax))
}

/// Routes `d_out` back through the argmax recorded by `maxpool2_forward`.
pub fn maxpool2_backward(in_dims: &[usize], argmax: &[usize], d_out: &Tensor) -> Result<Tensor> {
    if in_dims.len() != 3 {
        return Err(Error::shape("maxpool2 backward", format!("bad input dims {in_dims:?}")));
    }
    let expect = [in_dims[0], in_dims[1] / 2, in_dims[2] / 2];
    if d_out.dims() != expect || argmax.len() != d_out.len() {
        return Err(Error::shape(
            "maxpool2 backward",
            format!("gradient dims {:?} do not match pooled dims {expect:?}", d_out.dims()),
        ));
    }
    let mut d_in = vec![0.0; in_dims.iter().product()];
    for (&src, &g) in argmax.iter().zip(d_out.data()) {
        d_in[src] += g;
    }
    Tensor::new(in_dims, d_in)
}

/// Two-way softmax across the channel axis independently at every pixel
/// of a `[2, H, W]` tensor, computed with the max subtracted for stability.
pub fn pixel_softmax_forward(x: &Tensor) -> Result<Tensor> {
    let d = x.dims();
    if d.len() != 3 || d[0] != 2 {
        return Err(Error::shape(
            "pixel_softmax",
            format!("expected [2, H, W] input, got {d:?}"),
        ));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { context: "pixel_softmax" });
    }
    let (c, hw) = (d[0], d[1] * d[2]);
    let data = x.data();
    let mut out = vec![0.0; data.len()];
    for p in 0..hw {
        let mut m = f64::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(data[ch * hw + p]);
        }
        let mut z = 0.0;
        for ch in 0..c {
            let e = libm::exp(data[ch * hw + p] - m);
            out[ch * hw + p] = e;
            z += e;
        }
        for ch in 0..c {
            out[ch * hw + p] /= z;
        }
    }
    Tensor::new(d, out)
}

/// Gradient of `pixel_softmax_forward` expressed through its output `y`:
/// dx_c = y_c * (g_c - sum_k g_k * y_k) at each pixel.
pub fn pixel_softmax_backward(y: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    y.same_dims(d_out, "pixel_softmax backward")?;
    let d = y.dims();
    let (c, hw) = (d[0], d[1] * d[2]);
    let (yv, gv) = (y.data(), d_out.data());
    let mut d_in = vec![0.0; yv.len()];
    for p in 0..hw {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += gv[ch * hw + p] * yv[ch * hw + p];
        }
        for ch in 0..c {
            d_in[ch * hw + p] = yv[ch * hw + p] * (gv[ch * hw + p] - dot);
        }
    }
    Tensor::new(d, d_in)
}

/// One plain SGD update: `param -= lr * grad` for every layer in order.
/// `lr` must be finite and non-negative (zero is an explicit no-op);
/// the tape must match the layer list in count and dims.
pub fn sgd_step(layers: &mut [&mut ConvLayer], tape: &GradientTape, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::invalid("sgd_step", format!("learning rate {lr} not allowed")));
    }
    if layers.len() != tape.layers.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} layers but tape has {}", layers.len(), tape.layers.len()),
        ));
    }
    for (layer, g) in layers.iter().zip(&tape.layers) {
        if layer.weights.dims() != g.d_weights.dims() || layer.bias.len() != g.d_bias.len() {
            return Err(Error::shape("sgd_step", "tape entry dims do not match layer".into()));
        }
        if !g.d_weights.is_finite() || !g.d_bias.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "sgd_step" });
        }
    }
    for (layer, g) in layers.iter_mut().zip(&tape.layers) {
        for (w, d) in layer.weights.data_mut().iter_mut().zip(g.d_weights.data()) {
            *w -= lr * d;
        }
        for (b, d) in layer.bias.iter_mut().zip(&g.d_bias) {
            *b -= lr * d;
        }
    }
    Ok(())
}
