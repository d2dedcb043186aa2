//! Box overlays on grayscale frames: ground truth in blue, masked-RPN
//! detections in red, plain-RPN detections in green.

use amrpn_core::geometry::BBox;
use amrpn_core::image::Image;

pub const GT_BLUE: [u8; 3] = [0, 0, 255];
pub const MASKED_RED: [u8; 3] = [255, 0, 0];
pub const PLAIN_GREEN: [u8; 3] = [0, 255, 0];

/// Interleaved RGB copy of a grayscale frame.
pub fn gray_to_rgb(img: &Image) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(3 * img.data().len());
    for &v in img.data() {
        let g = v.round().clamp(0.0, 255.0) as u8;
        rgb.extend([g, g, g]);
    }
    rgb
}

/// Draws a 1-pixel rectangle outline, clipping edges that leave the
/// frame; a box entirely outside draws nothing.
pub fn draw_rect(rgb: &mut [u8], w: usize, h: usize, b: &BBox, color: [u8; 3]) {
    let x1 = b.x1.round() as i64;
    let y1 = b.y1.round() as i64;
    let x2 = b.x2.round() as i64;
    let y2 = b.y2.round() as i64;
    if x2 < 0 || y2 < 0 || x1 >= w as i64 || y1 >= h as i64 || x2 < x1 || y2 < y1 {
        return;
    }
    let mut put = |x: i64, y: i64| {
        if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
            let i = 3 * (y as usize * w + x as usize);
            rgb[i..i + 3].copy_from_slice(&color);
        }
    };
    for x in x1..=x2 {
        put(x, y1);
        put(x, y2);
    }
    for y in y1..=y2 {
        put(x1, y);
        put(x2, y);
    }
}
