//! VOT-style ground-truth parsing: one box per line, either an 8-number
//! polygon (reduced to its axis-aligned bounds) or a legacy 4-number
//! x,y,w,h record, scaled into 224x224 frame coordinates.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{BBox, FRAME_EXTENT};

/// Parses `groundtruth.txt` content. `orig_w`/`orig_h` are the source
/// frame extents; coordinates are scaled by (224/orig_w, 224/orig_h).
/// Blank lines are skipped; any malformed line fails with its 1-based
/// line number.
pub fn parse_vot_groundtruth(text: &str, orig_w: usize, orig_h: usize) -> Result<Vec<BBox>> {
    if orig_w == 0 || orig_h == 0 {
        return Err(Error::invalid("vot", "original extents must be positive".into()));
    }
    let sx = FRAME_EXTENT / orig_w as f64;
    let sy = FRAME_EXTENT / orig_h as f64;
    let mut boxes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<f64> = trimmed
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    detail: format!("not a number: {:?}", f.trim()),
                })
            })
            .collect::<Result<_>>()?;
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse { line: line_no, detail: "non-finite coordinate".into() });
        }
        let (x1, y1, x2, y2) = match fields.len() {
            8 => {
                let xs = [fields[0], fields[2], fields[4], fields[6]];
                let ys = [fields[1], fields[3], fields[5], fields[7]];
                let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (min(&xs), min(&ys), max(&xs), max(&ys))
            }
            4 => (
                fields[0],
                fields[1],
                fields[0] + fields[2],
                fields[1] + fields[3],
            ),
            n => {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("expected 4 or 8 fields, got {n}"),
                })
            }
        };
        if x2 < x1 || y2 < y1 {
            return Err(Error::Parse { line: line_no, detail: "negative box extent".into() });
        }
        boxes.push(BBox::new(
            (x1 * sx).clamp(0.0, FRAME_EXTENT),
            (y1 * sy).clamp(0.0, FRAME_EXTENT),
            (x2 * sx).clamp(0.0, FRAME_EXTENT),
            (y2 * sy).clamp(0.0, FRAME_EXTENT),
        ));
    }
    Ok(boxes)
}
