//! PGM/PPM codec, ASCII and binary variants, 8-bit samples. Color input
//! collapses to grayscale by Rec. 601 luminance.

use std::path::Path;

use amrpn_core::image::Image;

use crate::error::{io_err, CliError, Result};

/// Header tokens are whitespace-separated with `#` comments running to
/// end of line; the sample block starts one whitespace byte after maxval.
struct Header {
    magic: [u8; 2],
    w: usize,
    h: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let bad = |m: &str| CliError::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 2 {
        return Err(bad("truncated header"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments before each numeric field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_digit() => break,
                _ => return Err(bad("truncated header")),
            }
        }
        let mut v = 0usize;
        while let Some(b) = bytes.get(pos).filter(|b| b.is_ascii_digit()) {
            v = v * 10 + (b - b'0') as usize;
            pos += 1;
        }
        *field = v;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("missing separator after maxval")),
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(bad("zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit samples supported"));
    }
    Ok(Header { magic, w, h, maxval, data_start: pos })
}

fn ascii_samples(bytes: &[u8], count: usize, path: &Path) -> Result<Vec<f64>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| CliError::Data(format!("{}: non-ASCII sample block", path.display())))?;
    let vals: Vec<f64> = text
        .split_ascii_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| CliError::Data(format!("{}: bad sample {t:?}", path.display())))
        })
        .collect::<Result<_>>()?;
    if vals.len() < count {
        return Err(CliError::Data(format!(
            "{}: {} samples, expected {count}",
            path.display(),
            vals.len()
        )));
    }
    Ok(vals)
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Reads a PGM (P2/P5) or PPM (P3/P6) file into a grayscale frame,
/// rescaling samples to the [0, 255] range when maxval differs.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let hd = parse_header(&bytes, path)?;
    let n = hd.w * hd.h;
    let scale = 255.0 / hd.maxval as f64;
    let gray: Vec<f64> = match &hd.magic {
        b"P2" => ascii_samples(&bytes[hd.data_start..], n, path)?
            .into_iter()
            .take(n)
            .map(|v| v * scale)
            .collect(),
        b"P3" => {
            let s = ascii_samples(&bytes[hd.data_start..], 3 * n, path)?;
            (0..n).map(|i| luminance(s[3 * i], s[3 * i + 1], s[3 * i + 2]) * scale).collect()
        }
        b"P5" => {
            let raw = bytes[hd.data_start..].get(..n).ok_or_else(|| {
                CliError::Data(format!("{}: truncated sample block", path.display()))
            })?;
            raw.iter().map(|&b| b as f64 * scale).collect()
        }
        b"P6" => {
            let raw = bytes[hd.data_start..].get(..3 * n).ok_or_else(|| {
                CliError::Data(format!("{}: truncated sample block", path.display()))
            })?;
            (0..n)
                .map(|i| {
                    luminance(
                        raw[3 * i] as f64,
                        raw[3 * i + 1] as f64,
                        raw[3 * i + 2] as f64,
                    ) * scale
                })
                .collect()
        }
        m => {
            return Err(CliError::Data(format!(
                "{}: unsupported magic {:?}",
                path.display(),
                String::from_utf8_lossy(m)
            )))
        }
    };
    // Luminance of 8-bit samples cannot exceed 255, so this only fails on
    // genuinely malformed ASCII inputs.
    let clamped: Vec<f64> = gray.into_iter().map(|v| v.clamp(0.0, 255.0)).collect();
    Ok(Image::new(hd.h, hd.w, clamped)?)
}

/// Binary PGM (P5) bytes of a grayscale frame, samples rounded to u8.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend(img.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    out
}

/// Binary PGM (P5) bytes of a unit-range map scaled onto [0, 255].
pub fn encode_pgm_unit(w: usize, h: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

/// Binary PPM (P6) bytes from an interleaved RGB buffer.
pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * w * h, "rgb buffer extent");
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}
