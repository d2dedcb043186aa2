//! The six subcommands. Every one resolves settings the same way
//! (defaults, then config file, then flags), funnels all file output
//! through `OutDir`, and ends by writing a manifest.

use std::path::Path;

use amrpn_core::image::Sequence;
use amrpn_core::pipeline::{
    nets_from_bytes, nets_to_bytes, run_sequence, train_masknet, train_rpn, FrameResult, Nets,
    RunConfig,
};
use amrpn_core::synth::{generate_synthetic, SynthSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::config::{resolved_map, Settings};
use crate::error::{io_err, CliError, Result};
use crate::manifest::OutDir;
use crate::overlay::{draw_rect, gray_to_rgb, GT_BLUE, MASKED_RED, PLAIN_GREEN};
use crate::pnm::{encode_pgm, encode_pgm_unit, encode_ppm};

/// Command-line switches layered on top of the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Flags {
    pub seed: Option<u64>,
    pub mask: Option<bool>,
    pub fusion: Option<bool>,
    pub force_ones_mask: bool,
}

impl Flags {
    fn apply(&self, s: &mut Settings) {
        if let Some(seed) = self.seed {
            s.run.seed = seed;
            s.synth.seed = seed;
        }
        if let Some(m) = self.mask {
            s.run.use_mask = m;
        }
        if let Some(f) = self.fusion {
            s.run.fusion = f;
        }
        if self.force_ones_mask {
            s.run.force_ones_mask = true;
        }
    }
}

/// Label used in metric files. A forced all-ones mask gates nothing, so
/// such runs are labeled plain — their outputs are bit-identical to a
/// plain run and the files must match byte for byte.
fn variant_label(run: &RunConfig) -> &'static str {
    if !run.use_mask || run.force_ones_mask {
        "plain"
    } else if run.fusion {
        "masked+fusion"
    } else {
        "masked"
    }
}

fn settings_with_flags(mut settings: Settings, flags: &Flags) -> Result<Settings> {
    flags.apply(&mut settings);
    settings.run.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(settings)
}

fn load_nets(ckpt: Option<&Path>, cfg: &RunConfig) -> Result<Nets> {
    match ckpt {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
            nets_from_bytes(&bytes, cfg)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
        }
        // No checkpoint: freshly initialized nets, seeded for
        // reproducibility.
        None => Ok(Nets::new(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?),
    }
}

fn inputs_map(pairs: &[(&str, Option<&Path>)]) -> Map<String, Value> {
    let mut m = Map::new();
    for &(key, path) in pairs {
        let v = match path {
            Some(p) => Value::from(p.display().to_string()),
            None => Value::Null,
        };
        m.insert(format!("inputs.{key}"), v);
    }
    m
}

fn trace_csv(trace: &[(usize, f64)]) -> String {
    let mut csv = String::from("iter,loss\n");
    for &(i, l) in trace {
        csv.push_str(&format!("{i},{l}\n"));
    }
    csv
}

fn frames_csv(results: &[FrameResult], label: &str) -> String {
    let mut csv = String::from("frame,variant,iou,score,x1,y1,x2,y2\n");
    for r in results {
        let iou = r.iou_vs_gt.unwrap_or(0.0);
        match &r.detection {
            Some(d) => csv.push_str(&format!(
                "{},{},{:.6},{:.6},{:.2},{:.2},{:.2},{:.2}\n",
                r.frame_index, label, iou, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
            )),
            // A frame without a valid detection keeps its box cells empty.
            None => csv.push_str(&format!("{},{},{:.6},,,,,\n", r.frame_index, label, iou)),
        }
    }
    csv
}

/// Ground truth as 8-number polygon lines; corner min/max parsing
/// reproduces the written coordinates exactly.
fn groundtruth_text(seq: &Sequence) -> String {
    let mut text = String::new();
    for b in &seq.gt {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            b.x1, b.y1, b.x2, b.y1, b.x2, b.y2, b.x1, b.y2
        ));
    }
    text
}

pub fn synth(settings: Settings, flags: &Flags, out: &Path) -> Result<()> {
    let settings = settings_with_flags(settings, flags)?;
    let mut dir = OutDir::create(out)?;
    for i in 0..settings.synth_count {
        // Each sequence draws from its own offset seed so the tree is a
        // pure function of the base seed.
        let spec = SynthSpec { seed: settings.synth.seed + i as u64, ..settings.synth.clone() };
        let seq = generate_synthetic(&spec)?;
        let name = format!("seq{i:04}");
        dir.write(&format!("{name}/groundtruth.txt"), groundtruth_text(&seq).as_bytes())?;
        for (f, frame) in seq.frames.iter().enumerate() {
            dir.write(&format!("{name}/{f:08}.pgm"), &encode_pgm(frame))?;
        }
    }
    println!("wrote {} sequences", settings.synth_count);
    dir.finish("synth", resolved_map(&settings), Map::new())
}

pub fn train_rpn_cmd(
    settings: Settings,
    flags: &Flags,
    data: &Path,
    ckpt: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let settings = settings_with_flags(settings, flags)?;
    let dataset = crate::dataset::load_dataset(data)?;
    let mut dir = OutDir::create(out)?;
    let mut nets = load_nets(ckpt, &settings.run)?;
    let (backbone, rpn, trace) =
        train_rpn(&dataset, &settings.run, |i, l| println!("{i},{l}"))?;
    nets.backbone = backbone;
    nets.rpn = rpn;
    dir.write("net.ckpt", &nets_to_bytes(&nets))?;
    dir.write("loss_rpn.csv", trace_csv(&trace).as_bytes())?;
    dir.finish(
        "train-rpn",
        resolved_map(&settings),
        inputs_map(&[("data", Some(data)), ("ckpt", ckpt)]),
    )
}

pub fn train_mask_cmd(
    settings: Settings,
    flags: &Flags,
    data: &Path,
    ckpt: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let settings = settings_with_flags(settings, flags)?;
    let dataset = crate::dataset::load_dataset(data)?;
    let mut dir = OutDir::create(out)?;
    let mut nets = load_nets(ckpt, &settings.run)?;
    let (masknet, trace) =
        train_masknet(&dataset, &settings.run, |i, l| println!("{i},{l}"))?;
    nets.masknet = masknet;
    dir.write("net.ckpt", &nets_to_bytes(&nets))?;
    dir.write("loss_mask.csv", trace_csv(&trace).as_bytes())?;
    dir.finish(
        "train-mask",
        resolved_map(&settings),
        inputs_map(&[("data", Some(data)), ("ckpt", ckpt)]),
    )
}

pub fn run_cmd(
    settings: Settings,
    flags: &Flags,
    seq_dir: &Path,
    ckpt: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let settings = settings_with_flags(settings, flags)?;
    let seq = crate::dataset::load_sequence(seq_dir)?;
    let nets = load_nets(ckpt, &settings.run)?;
    let results = run_sequence(&seq, &nets, &settings.run, None)?;
    let label = variant_label(&settings.run);
    let mut dir = OutDir::create(out)?;
    dir.write("frames.csv", frames_csv(&results, label).as_bytes())?;
    for r in &results {
        let hm = &r.heatmap;
        dir.write(
            &format!("heatmaps/{:08}.pgm", r.frame_index),
            &encode_pgm_unit(hm.feat_w, hm.feat_h, hm.values()),
        )?;
        let bits: Vec<f64> = r.mask.bits().iter().map(|&b| b as f64).collect();
        dir.write(
            &format!("masks/{:08}.pgm", r.frame_index),
            &encode_pgm_unit(r.mask.feat_w, r.mask.feat_h, &bits),
        )?;
    }
    dir.finish(
        "run",
        resolved_map(&settings),
        inputs_map(&[("seq", Some(seq_dir)), ("ckpt", ckpt)]),
    )
}

pub fn eval_cmd(
    settings: Settings,
    flags: &Flags,
    data: &Path,
    ckpt: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let settings = settings_with_flags(settings, flags)?;
    let dataset = crate::dataset::load_dataset(data)?;
    let nets = load_nets(ckpt, &settings.run)?;
    let label = variant_label(&settings.run);
    let mut dir = OutDir::create(out)?;
    let mut per_seq = Map::new();
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in &dataset {
        let results = run_sequence(seq, &nets, &settings.run, None)?;
        dir.write(&format!("metrics/{}.csv", seq.name), frames_csv(&results, label).as_bytes())?;
        let ious: Vec<f64> = results.iter().map(|r| r.iou_vs_gt.unwrap_or(0.0)).collect();
        let mean = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
        per_seq.insert(seq.name.clone(), Value::from(mean));
        total += ious.iter().sum::<f64>();
        count += ious.len();
    }
    let mean_iou = total / count.max(1) as f64;
    let summary = serde_json::json!({
        "variant": label,
        "mean_iou": mean_iou,
        "per_sequence": per_seq,
    });
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serialization");
    text.push('\n');
    dir.write("summary.json", text.as_bytes())?;
    dir.finish(
        "eval",
        resolved_map(&settings),
        inputs_map(&[("data", Some(data)), ("ckpt", ckpt)]),
    )
}

pub fn export_overlays_cmd(
    settings: Settings,
    flags: &Flags,
    seq_dir: &Path,
    ckpt: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let settings = settings_with_flags(settings, flags)?;
    let seq = crate::dataset::load_sequence(seq_dir)?;
    let nets = load_nets(ckpt, &settings.run)?;
    // Both variants of the same frames: masked detections in red, the
    // plain baseline in green, ground truth in blue.
    let mut masked_cfg = settings.run.clone();
    masked_cfg.use_mask = true;
    masked_cfg.force_ones_mask = false;
    let mut plain_cfg = settings.run.clone();
    plain_cfg.use_mask = false;
    let masked = run_sequence(&seq, &nets, &masked_cfg, None)?;
    let plain = run_sequence(&seq, &nets, &plain_cfg, None)?;
    let mut dir = OutDir::create(out)?;
    for (m, p) in masked.iter().zip(&plain) {
        let idx = m.frame_index;
        let frame = &seq.frames[idx];
        let mut rgb = gray_to_rgb(frame);
        if let Some(d) = &p.detection {
            draw_rect(&mut rgb, frame.w, frame.h, &d.bbox, PLAIN_GREEN);
        }
        if let Some(d) = &m.detection {
            draw_rect(&mut rgb, frame.w, frame.h, &d.bbox, MASKED_RED);
        }
        draw_rect(&mut rgb, frame.w, frame.h, &seq.gt[idx], GT_BLUE);
        dir.write(&format!("overlays/{idx:08}.ppm"), &encode_ppm(frame.w, frame.h, &rgb))?;
    }
    dir.finish(
        "export-overlays",
        resolved_map(&settings),
        inputs_map(&[("seq", Some(seq_dir)), ("ckpt", ckpt)]),
    )
}
