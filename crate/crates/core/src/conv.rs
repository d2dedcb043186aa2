//! 2-D and 3-D convolution layers with hand-derived backward passes.
//!
//! Convolution here means cross-correlation (no kernel flip). All strides
//! in the shipped networks are 1; the generic strided path exists for
//! completeness and is exercised by the oracle tests.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Convolution layer; 4-D weights make it a 2-D conv over `[C, H, W]`
/// inputs, 5-D weights a 3-D conv over `[T, C, H, W]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[out_c, in_c, kh, kw]` or `[out_c, in_c, kt, kh, kw]`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    /// Spatial stride.
    pub stride: usize,
    /// Spatial zero padding.
    pub pad: usize,
    /// Temporal zero padding (3-D only).
    pub pad_t: usize,
}

/// Output extent of a convolution axis: `floor((in + 2*pad - k)/stride) + 1`.
/// `None` when the kernel does not fit.
pub fn out_extent(input: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Uniform init in [-s, s] with s = sqrt(6 / (fan_in + fan_out)).
fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let s = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    (0..n).map(|_| rng.gen_range(-s..s)).collect()
}

impl ConvLayer {
    pub fn new_2d(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = k * k;
        let data = glorot_uniform(rng, in_c * fan, out_c * fan, out_c * in_c * fan);
        ConvLayer {
            weights: Tensor::new(&[out_c, in_c, k, k], data).expect("valid 2-D weight dims"),
            bias: vec![0.0; out_c],
            stride,
            pad,
            pad_t: 0,
        }
    }

    pub fn new_3d(
        in_c: usize,
        out_c: usize,
        kt: usize,
        k: usize,
        stride: usize,
        pad: usize,
        pad_t: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = kt * k * k;
        let data = glorot_uniform(rng, in_c * fan, out_c * fan, out_c * in_c * fan);
        ConvLayer {
            weights: Tensor::new(&[out_c, in_c, kt, k, k], data).expect("valid 3-D weight dims"),
            bias: vec![0.0; out_c],
            stride,
            pad,
            pad_t,
        }
    }

    pub fn is_3d(&self) -> bool {
        self.weights.rank() == 5
    }

    pub fn out_c(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_c(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn k_t(&self) -> usize {
        if self.is_3d() {
            self.weights.dims()[2]
        } else {
            1
        }
    }

    pub fn k_h(&self) -> usize {
        self.weights.dims()[self.weights.rank() - 2]
    }

    pub fn k_w(&self) -> usize {
        self.weights.dims()[self.weights.rank() - 1]
    }

    /// Number of weight values per (out channel, in channel) pair.
    fn kernel_len(&self) -> usize {
        self.k_t() * self.k_h() * self.k_w()
    }
}

/// Gradients for one layer's parameters, dims matching the layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_weights: Tensor,
    pub d_bias: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros_like(layer: &ConvLayer) -> Self {
        LayerGrads {
            d_weights: Tensor::zeros(layer.weights.dims()).expect("layer dims valid"),
            d_bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn add_scaled(&mut self, other: &LayerGrads, s: f64) {
        for (a, b) in self
            .d_weights
            .data_mut()
            .iter_mut()
            .zip(other.d_weights.data())
        {
            *a += s * b;
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            *a += s * b;
        }
    }
}

/// Parameter gradients for an ordered list of layers.
#[derive(Debug, Clone)]
pub struct GradientTape {
    pub layers: Vec<LayerGrads>,
}

impl GradientTape {
    pub fn zeros_like(layers: &[&ConvLayer]) -> Self {
        GradientTape {
            layers: layers.iter().map(|l| LayerGrads::zeros_like(l)).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradientTape, s: f64) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled(b, s);
        }
    }
}

/// Dot product with eight independent accumulators; the fixed summation
/// order keeps results bit-reproducible while still vectorizing.
#[inline]
fn dot8(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
        s += xa * xb;
    }
    s
}

/// out_plane += cross-correlation of in_plane with one kh*kw kernel.
#[allow(clippy::too_many_arguments)]
fn plane_conv_acc(
    inp: &[f64],
    ih: usize,
    iw: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
    oh: usize,
    ow: usize,
) {
    for ky in 0..kh {
        for kx in 0..kw {
            let w = kernel[ky * kw + kx];
            if w == 0.0 {
                continue;
            }
            if stride == 1 {
                // x + kx - pad in [0, iw)
                let xs = pad.saturating_sub(kx);
                let xe = ow.min(iw + pad - kx.min(iw + pad));
                if xs >= xe {
                    continue;
                }
                for y in 0..oh {
                    let iy = (y + ky).wrapping_sub(pad);
                    if iy >= ih {
                        continue;
                    }
                    let irow = &inp[iy * iw + xs + kx - pad..iy * iw + xe + kx - pad];
                    let orow = &mut out[y * ow + xs..y * ow + xe];
                    for (o, i) in orow.iter_mut().zip(irow) {
                        *o += w * i;
                    }
                }
            } else {
                for y in 0..oh {
                    let iy = (y * stride + ky).wrapping_sub(pad);
                    if iy >= ih {
                        continue;
                    }
                    for x in 0..ow {
                        let ix = (x * stride + kx).wrapping_sub(pad);
                        if ix < iw {
                            out[y * ow + x] += w * inp[iy * iw + ix];
                        }
                    }
                }
            }
        }
    }
}

/// din_plane += scatter of d_out through one kernel (input gradient).
#[allow(clippy::too_many_arguments)]
fn plane_input_grad_acc(
    d_out: &[f64],
    oh: usize,
    ow: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    d_in: &mut [f64],
    ih: usize,
    iw: usize,
) {
    for ky in 0..kh {
        for kx in 0..kw {
            let w = kernel[ky * kw + kx];
            if w == 0.0 {
                continue;
            }
            if stride == 1 {
                let xs = pad.saturating_sub(kx);
                let xe = ow.min(iw + pad - kx.min(iw + pad));
                if xs >= xe {
                    continue;
                }
                for y in 0..oh {
                    let iy = (y + ky).wrapping_sub(pad);
                    if iy >= ih {
                        continue;
                    }
                    let orow = &d_out[y * ow + xs..y * ow + xe];
                    let irow = &mut d_in[iy * iw + xs + kx - pad..iy * iw + xe + kx - pad];
                    for (i, o) in irow.iter_mut().zip(orow) {
                        *i += w * o;
                    }
                }
            } else {
                for y in 0..oh {
                    let iy = (y * stride + ky).wrapping_sub(pad);
                    if iy >= ih {
                        continue;
                    }
                    for x in 0..ow {
                        let ix = (x * stride + kx).wrapping_sub(pad);
                        if ix < iw {
                            d_in[iy * iw + ix] += w * d_out[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// d_kernel += weight gradient contributions from one (in, out) plane pair.
#[allow(clippy::too_many_arguments)]
fn plane_weight_grad_acc(
    inp: &[f64],
    ih: usize,
    iw: usize,
    d_out: &[f64],
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    d_kernel: &mut [f64],
) {
    for ky in 0..kh {
        for kx in 0..kw {
            let mut acc = 0.0;
            if stride == 1 {
                let xs = pad.saturating_sub(kx);
                let xe = ow.min(iw + pad - kx.min(iw + pad));
                if xs >= xe {
                    continue;
                }
                for y in 0..oh {
                    let iy = (y + ky).wrapping_sub(pad);
                    if iy >= ih {
                        continue;
                    }
                    acc += dot8(
                        &d_out[y * ow + xs..y * ow + xe],
                        &inp[iy * iw + xs + kx - pad..iy * iw + xe + kx - pad],
                    );
                }
            } else {
                for y in 0..oh {
                    let iy = (y * stride + ky).wrapping_sub(pad);
                    if iy >= ih {
                        continue;
                    }
                    for x in 0..ow {
                        let ix = (x * stride + kx).wrapping_sub(pad);
                        if ix < iw {
                            acc += d_out[y * ow + x] * inp[iy * iw + ix];
                        }
                    }
                }
            }
            d_kernel[ky * kw + kx] += acc;
        }
    }
}

fn check_2d(input: &Tensor, layer: &ConvLayer, context: &'static str) -> Result<[usize; 3]> {
    if layer.is_3d() {
        return Err(Error::invalid(context, "layer has 5-D weights, use conv3d".into()));
    }
    let d = input.dims();
    if d.len() != 3 {
        return Err(Error::shape(
            context,
            format!("expected [C, H, W] input, got {d:?}"),
        ));
    }
    if d[0] != layer.in_c() {
        return Err(Error::shape(
            context,
            format!("input has {} channels, layer expects {}", d[0], layer.in_c()),
        ));
    }
    let oh = out_extent(d[1], layer.k_h(), layer.pad, layer.stride);
    let ow = out_extent(d[2], layer.k_w(), layer.pad, layer.stride);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok([layer.out_c(), oh, ow]),
        _ => Err(Error::shape(
            context,
            format!("kernel {}x{} does not fit {}x{} input", layer.k_h(), layer.k_w(), d[1], d[2]),
        )),
    }
}

fn check_3d(input: &Tensor, layer: &ConvLayer, context: &'static str) -> Result<[usize; 4]> {
    if !layer.is_3d() {
        return Err(Error::invalid(context, "layer has 4-D weights, use conv2d".into()));
    }
    let d = input.dims();
    if d.len() != 4 {
        return Err(Error::shape(
            context,
            format!("expected [T, C, H, W] input, got {d:?}"),
        ));
    }
    if d[1] != layer.in_c() {
        return Err(Error::shape(
            context,
            format!("input has {} channels, layer expects {}", d[1], layer.in_c()),
        ));
    }
    let ot = out_extent(d[0], layer.k_t(), layer.pad_t, 1);
    let oh = out_extent(d[2], layer.k_h(), layer.pad, layer.stride);
    let ow = out_extent(d[3], layer.k_w(), layer.pad, layer.stride);
    match (ot, oh, ow) {
        (Some(ot), Some(oh), Some(ow)) if ot >= 1 && oh >= 1 && ow >= 1 => {
            Ok([ot, layer.out_c(), oh, ow])
        }
        _ => Err(Error::shape(
            context,
            format!("kernel does not fit input dims {d:?}"),
        )),
    }
}

/// Cross-correlation of a `[C, H, W]` input with bias. Rejects channel
/// mismatches, kernels that do not fit, and non-finite input.
pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let [oc, oh, ow] = check_2d(input, layer, "conv2d")?;
    if !input.is_finite() {
        return Err(Error::NonFinite { context: "conv2d" });
    }
    let d = input.dims();
    let (ic, ih, iw) = (d[0], d[1], d[2]);
    let klen = layer.k_h() * layer.k_w();
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        let och = &mut out[o * oh * ow..(o + 1) * oh * ow];
        och.fill(layer.bias[o]);
        for c in 0..ic {
            plane_conv_acc(
                input.plane(c),
                ih,
                iw,
                &layer.weights.data()[(o * ic + c) * klen..(o * ic + c + 1) * klen],
                layer.k_h(),
                layer.k_w(),
                layer.stride,
                layer.pad,
                och,
                oh,
                ow,
            );
        }
    }
    Tensor::new(&[oc, oh, ow], out)
}

/// Gradients of `conv2d_forward` given the forward input and upstream
/// `d_out`; returns parameter grads and the input gradient. `d_out` must
/// have exactly the dims the forward pass produced.
pub fn conv2d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    d_out: &Tensor,
) -> Result<(LayerGrads, Tensor)> {
    let out_dims = check_2d(input, layer, "conv2d backward")?;
    if d_out.dims() != out_dims {
        return Err(Error::shape(
            "conv2d backward",
            format!(
                "gradient dims {:?} do not match recorded output {:?}",
                d_out.dims(),
                out_dims
            ),
        ));
    }
    let d = input.dims();
    let (ic, ih, iw) = (d[0], d[1], d[2]);
    let [oc, oh, ow] = out_dims;
    let klen = layer.k_h() * layer.k_w();
    let mut grads = LayerGrads::zeros_like(layer);
    let mut d_in = vec![0.0; input.len()];
    for o in 0..oc {
        let dout_ch = d_out.plane(o);
        grads.d_bias[o] = dout_ch.iter().sum();
        for c in 0..ic {
            let kslice = (o * ic + c) * klen..(o * ic + c + 1) * klen;
            plane_weight_grad_acc(
                input.plane(c),
                ih,
                iw,
                dout_ch,
                oh,
                ow,
                layer.k_h(),
                layer.k_w(),
                layer.stride,
                layer.pad,
                &mut grads.d_weights.data_mut()[kslice.clone()],
            );
            plane_input_grad_acc(
                dout_ch,
                oh,
                ow,
                &layer.weights.data()[kslice],
                layer.k_h(),
                layer.k_w(),
                layer.stride,
                layer.pad,
                &mut d_in[c * ih * iw..(c + 1) * ih * iw],
                ih,
                iw,
            );
        }
    }
    Ok((grads, Tensor::new(input.dims(), d_in)?))
}

/// Cross-correlation of a `[T, C, H, W]` input over time, channels, and
/// space; the temporal window is summed into each output time step.
pub fn conv3d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let [ot, oc, oh, ow] = check_3d(input, layer, "conv3d")?;
    if !input.is_finite() {
        return Err(Error::NonFinite { context: "conv3d" });
    }
    let d = input.dims();
    let (it, ic, ih, iw) = (d[0], d[1], d[2], d[3]);
    let (kt, kh, kw) = (layer.k_t(), layer.k_h(), layer.k_w());
    let spatial = kh * kw;
    let klen = layer.kernel_len();
    let mut out = vec![0.0; ot * oc * oh * ow];
    for t in 0..ot {
        for o in 0..oc {
            let base = (t * oc + o) * oh * ow;
            let och = &mut out[base..base + oh * ow];
            och.fill(layer.bias[o]);
            for dt in 0..kt {
                let ti = (t + dt).wrapping_sub(layer.pad_t);
                if ti >= it {
                    continue;
                }
                for c in 0..ic {
                    let in_base = (ti * ic + c) * ih * iw;
                    let k_base = (o * ic + c) * klen + dt * spatial;
                    plane_conv_acc(
                        &input.data()[in_base..in_base + ih * iw],
                        ih,
                        iw,
                        &layer.weights.data()[k_base..k_base + spatial],
                        kh,
                        kw,
                        layer.stride,
                        layer.pad,
                        och,
                        oh,
                        ow,
                    );
                }
            }
        }
    }
    Tensor::new(&[ot, oc, oh, ow], out)
}

/// Gradients of `conv3d_forward`; same contract as `conv2d_backward`.
pub fn conv3d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    d_out: &Tensor,
) -> Result<(LayerGrads, Tensor)> {
    let out_dims = check_3d(input, layer, "conv3d backward")?;
    if d_out.dims() != out_dims {
        return Err(Error::shape(
            "conv3d backward",
            format!(
                "gradient dims {:?} do not match recorded output {:?}",
                d_out.dims(),
                out_dims
            ),
        ));
    }
    let d = input.dims();
    let (it, ic, ih, iw) = (d[0], d[1], d[2], d[3]);
    let [ot, oc, oh, ow] = out_dims;
    let (kt, kh, kw) = (layer.k_t(), layer.k_h(), layer.k_w());
    let spatial = kh * kw;
    let klen = layer.kernel_len();
    let mut grads = LayerGrads::zeros_like(layer);
    let mut d_in = vec![0.0; input.len()];
    for t in 0..ot {
        for o in 0..oc {
            let base = (t * oc + o) * oh * ow;
            let dout_ch = &d_out.data()[base..base + oh * ow];
            grads.d_bias[o] += dout_ch.iter().sum::<f64>();
            for dt in 0..kt {
                let ti = (t + dt).wrapping_sub(layer.pad_t);
                if ti >= it {
                    continue;
                }
                for c in 0..ic {
                    let in_base = (ti * ic + c) * ih * iw;
                    let k_base = (o * ic + c) * klen + dt * spatial;
                    plane_weight_grad_acc(
                        &input.data()[in_base..in_base + ih * iw],
                        ih,
                        iw,
                        dout_ch,
                        oh,
                        ow,
                        kh,
                        kw,
                        layer.stride,
                        layer.pad,
                        &mut grads.d_weights.data_mut()[k_base..k_base + spatial],
                    );
                    plane_input_grad_acc(
                        dout_ch,
                        oh,
                        ow,
                        &layer.weights.data()[k_base..k_base + spatial],
                        kh,
                        kw,
                        layer.stride,
                        layer.pad,
                        &mut d_in[in_base..in_base + ih * iw],
                        ih,
                        iw,
                    );
                }
            }
        }
    }
    Ok((grads, Tensor::new(input.dims(), d_in)?))
}
