//! Grayscale raster frames, bilinear resizing, and annotated sequences.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{BBox, FRAME_EXTENT};
use crate::tensor::Tensor;

/// 8-bit-range grayscale frame stored as f64 so resampling stays exact;
/// values lie in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::shape(
                "image",
                format!("{} values for {h}x{w} image", data.len()),
            ));
        }
        if data.iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(Error::invalid("image", "pixel values must lie in [0, 255]".into()));
        }
        Ok(Image { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Result<Self> {
        Image::new(h, w, vec![value; h * w])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// `[1, H, W]` tensor scaled to [0, 1] for the backbone.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v / 255.0).collect();
        Tensor::new(&[1, self.h, self.w], data).expect("image dims valid")
    }
}

/// Bilinear resample with half-pixel-centered sampling; an identity
/// resize reproduces the input exactly.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize", "output extents must be positive".into()));
    }
    if out_h == img.h && out_w == img.w {
        return Ok(img.clone());
    }
    let sy = img.h as f64 / out_h as f64;
    let sx = img.w as f64 / out_w as f64;
    let mut data = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.h - 1) as f64);
        let y0 = fy as usize;
        let y1 = (y0 + 1).min(img.h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.w - 1) as f64);
            let x0 = fx as usize;
            let x1 = (x0 + 1).min(img.w - 1);
            let wx = fx - x0 as f64;
            let top = img.pixel(y0, x0) * (1.0 - wx) + img.pixel(y0, x1) * wx;
            let bot = img.pixel(y1, x0) * (1.0 - wx) + img.pixel(y1, x1) * wx;
            data.push(top * (1.0 - wy) + bot * wy);
        }
    }
    Image::new(out_h, out_w, data)
}

/// Resize to the fixed pipeline extent.
pub fn resize_frame(img: &Image) -> Result<Image> {
    resize_bilinear(img, FRAME_EXTENT as usize, FRAME_EXTENT as usize)
}

/// An ordered run of frames with one ground-truth box per frame, both in
/// resized (224x224) coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Image>,
    pub gt: Vec<BBox>,
    pub orig_w: usize,
    pub orig_h: usize,
}

impl Sequence {
    pub fn new(
        name: String,
        frames: Vec<Image>,
        gt: Vec<BBox>,
        orig_w: usize,
        orig_h: usize,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if frames.len() != gt.len() {
            return Err(Error::shape(
                "sequence",
                format!("{} frames but {} ground-truth boxes", frames.len(), gt.len()),
            ));
        }
        for (i, b) in gt.iter().enumerate() {
            let ok = b.x1.is_finite()
                && b.y1.is_finite()
                && b.x2.is_finite()
                && b.y2.is_finite()
                && b.x1 <= b.x2
                && b.y1 <= b.y2
                && b.x1 >= 0.0
                && b.y1 >= 0.0
                && b.x2 <= FRAME_EXTENT
                && b.y2 <= FRAME_EXTENT;
            if !ok {
                return Err(Error::invalid(
                    "sequence",
                    format!("ground-truth box {i} outside the resized frame: {b:?}"),
                ));
            }
        }
        Ok(Sequence { name, frames, gt, orig_w, orig_h })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
