//! Sequence loading from the on-disk layout: one directory per sequence
//! holding `groundtruth.txt` plus numbered frame images.

use std::path::{Path, PathBuf};

use amrpn_core::image::{resize_frame, Image, Sequence};
use amrpn_core::vot::parse_vot_groundtruth;

use crate::error::{io_err, CliError, Result};
use crate::pnm::read_image;

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm" | "ppm" | "pnm")
            )
        })
        .collect();
    // Zero-padded names make lexicographic order the frame order.
    frames.sort();
    Ok(frames)
}

/// Loads one sequence directory: parses the ground truth against the
/// first frame's extents, resizes every frame to the pipeline extent.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let gt_path = dir.join("groundtruth.txt");
    let text = std::fs::read_to_string(&gt_path)
        .map_err(|_| CliError::Data(format!("missing ground truth: {}", gt_path.display())))?;
    let paths = frame_paths(dir)?;
    if paths.is_empty() {
        return Err(CliError::Data(format!("{}: no frame images found", dir.display())));
    }
    let mut frames: Vec<Image> = Vec::with_capacity(paths.len());
    let mut orig = (0usize, 0usize);
    for p in &paths {
        let raw = read_image(p)?;
        if frames.is_empty() {
            orig = (raw.w, raw.h);
        }
        frames.push(resize_frame(&raw)?);
    }
    let gt = parse_vot_groundtruth(&text, orig.0, orig.1)
        .map_err(|e| CliError::Data(format!("{}: {e}", gt_path.display())))?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    Ok(Sequence::new(name, frames, gt, orig.0, orig.1)?)
}

/// Loads every sequence directory under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Data(format!("{}: no sequence directories", root.display())));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}
