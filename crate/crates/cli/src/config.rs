//! Configuration: a flat JSON object of dotted keys layered over built-in
//! defaults, with command-line flags applied on top. The fully resolved
//! settings are echoed into every manifest so a run is reproducible from
//! the manifest alone.

use std::path::Path;

use amrpn_core::backbone::BACKBONE_STAGES;
use amrpn_core::pipeline::RunConfig;
use amrpn_core::rpn::RegDivisor;
use amrpn_core::synth::SynthSpec;
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct Settings {
    pub run: RunConfig,
    pub synth: SynthSpec,
    /// Sequences generated per `synth` invocation.
    pub synth_count: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { run: RunConfig::default(), synth: SynthSpec::default(), synth_count: 5 }
    }
}

fn usage(key: &str, what: &str) -> CliError {
    CliError::Usage(format!("config key {key:?}: {what}"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| usage(key, "expected a number"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| usage(key, "expected a non-negative integer"))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64().ok_or_else(|| usage(key, "expected a non-negative integer"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| usage(key, "expected true or false"))
}

fn as_f64_list(key: &str, v: &Value) -> Result<Vec<f64>> {
    let arr = v.as_array().ok_or_else(|| usage(key, "expected an array of numbers"))?;
    arr.iter().map(|x| as_f64(key, x)).collect()
}

fn apply_key(s: &mut Settings, key: &str, v: &Value) -> Result<()> {
    match key {
        "grid.h" => s.run.feat_h = as_usize(key, v)?,
        "grid.w" => s.run.feat_w = as_usize(key, v)?,
        "anchors.stride" => s.run.stride = as_f64(key, v)?,
        "anchors.scales" => s.run.scales = as_f64_list(key, v)?,
        "anchors.ratios" => s.run.ratios = as_f64_list(key, v)?,
        "heatmap.threshold" => s.run.heat_thresh = as_f64(key, v)?,
        "mask.threshold" => s.run.mask_thresh = as_f64(key, v)?,
        "labels.pos_iou" => s.run.pos_iou = as_f64(key, v)?,
        "labels.neg_iou" => s.run.neg_iou = as_f64(key, v)?,
        "labels.neg_ratio" => s.run.neg_ratio = as_usize(key, v)?,
        "nms.iou" => s.run.nms_iou = as_f64(key, v)?,
        "nms.keep" => s.run.keep = as_usize(key, v)?,
        "train.lr" => s.run.lr = as_f64(key, v)?,
        "train.batch" => s.run.batch = as_usize(key, v)?,
        "train.iterations" => s.run.iterations = as_usize(key, v)?,
        "train.record_every" => s.run.record_every = as_usize(key, v)?,
        "train.seed" => s.run.seed = as_u64(key, v)?,
        "train.backbone" => s.run.train_backbone = as_bool(key, v)?,
        "train.reg_divisor" => {
            s.run.reg_divisor = match v.as_str() {
                Some("valid-count") => RegDivisor::ValidCount,
                Some("positive-count") => RegDivisor::PositiveCount,
                _ => return Err(usage(key, "expected \"valid-count\" or \"positive-count\"")),
            }
        }
        "run.use_mask" => s.run.use_mask = as_bool(key, v)?,
        "run.fusion" => s.run.fusion = as_bool(key, v)?,
        "run.force_ones_mask" => s.run.force_ones_mask = as_bool(key, v)?,
        "run.gt_init" => s.run.gt_init = as_bool(key, v)?,
        "backbone.channels" => {
            let list = as_f64_list(key, v)?;
            if list.len() != BACKBONE_STAGES || list.iter().any(|&c| c < 1.0 || c.fract() != 0.0)
            {
                return Err(usage(key, "expected 4 positive integers"));
            }
            for (dst, src) in s.run.backbone.channels.iter_mut().zip(list) {
                *dst = src as usize;
            }
        }
        "masknet.ch_3d_1" => s.run.masknet.ch_3d_1 = as_usize(key, v)?,
        "masknet.ch_3d_2" => s.run.masknet.ch_3d_2 = as_usize(key, v)?,
        "masknet.ch_2d" => s.run.masknet.ch_2d = as_usize(key, v)?,
        "masknet.ch_fc" => s.run.masknet.ch_fc = as_usize(key, v)?,
        "masknet.fc_kernel" => s.run.masknet.fc_kernel = as_usize(key, v)?,
        "synth.count" => s.synth_count = as_usize(key, v)?,
        "synth.seed" => s.synth.seed = as_u64(key, v)?,
        "synth.frames" => s.synth.frames = as_usize(key, v)?,
        "synth.extent" => s.synth.extent = as_usize(key, v)?,
        "synth.target_size" => s.synth.target_size = as_f64(key, v)?,
        "synth.target_speed" => s.synth.target_speed = as_f64(key, v)?,
        "synth.distractors" => s.synth.distractors = as_usize(key, v)?,
        "synth.distractor_size" => s.synth.distractor_size = as_f64(key, v)?,
        "synth.distractor_speed" => s.synth.distractor_speed = as_f64(key, v)?,
        "synth.noise" => s.synth.noise = as_f64(key, v)?,
        "synth.target_level" => s.synth.target_level = as_f64(key, v)?,
        "synth.distractor_level" => s.synth.distractor_level = as_f64(key, v)?,
        "synth.background_level" => s.synth.background_level = as_f64(key, v)?,
        _ => return Err(usage(key, "unknown key")),
    }
    Ok(())
}

/// Defaults overlaid with the flat dotted-key JSON object at `path`.
pub fn load_settings(path: Option<&Path>) -> Result<Settings> {
    let mut s = Settings::default();
    let Some(path) = path else { return Ok(s) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let obj = value
        .as_object()
        .ok_or_else(|| CliError::Usage(format!("{}: expected a JSON object", path.display())))?;
    for (key, v) in obj {
        apply_key(&mut s, key, v)?;
    }
    Ok(s)
}

/// The full effective configuration as the same flat dotted-key map the
/// config file uses (serde_json's default map keeps keys sorted, so the
/// serialized form is deterministic).
pub fn resolved_map(s: &Settings) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("grid.h".into(), Value::from(s.run.feat_h));
    m.insert("grid.w".into(), Value::from(s.run.feat_w));
    m.insert("anchors.stride".into(), Value::from(s.run.stride));
    m.insert("anchors.scales".into(), Value::from(s.run.scales.clone()));
    m.insert("anchors.ratios".into(), Value::from(s.run.ratios.clone()));
    m.insert("heatmap.threshold".into(), Value::from(s.run.heat_thresh));
    m.insert("mask.threshold".into(), Value::from(s.run.mask_thresh));
    m.insert("labels.pos_iou".into(), Value::from(s.run.pos_iou));
    m.insert("labels.neg_iou".into(), Value::from(s.run.neg_iou));
    m.insert("labels.neg_ratio".into(), Value::from(s.run.neg_ratio));
    m.insert("nms.iou".into(), Value::from(s.run.nms_iou));
    m.insert("nms.keep".into(), Value::from(s.run.keep));
    m.insert("train.lr".into(), Value::from(s.run.lr));
    m.insert("train.batch".into(), Value::from(s.run.batch));
    m.insert("train.iterations".into(), Value::from(s.run.iterations));
    m.insert("train.record_every".into(), Value::from(s.run.record_every));
    m.insert("train.seed".into(), Value::from(s.run.seed));
    m.insert("train.backbone".into(), Value::from(s.run.train_backbone));
    m.insert(
        "train.reg_divisor".into(),
        Value::from(match s.run.reg_divisor {
            RegDivisor::ValidCount => "valid-count",
            RegDivisor::PositiveCount => "positive-count",
        }),
    );
    m.insert("run.use_mask".into(), Value::from(s.run.use_mask));
    m.insert("run.fusion".into(), Value::from(s.run.fusion));
    m.insert("run.force_ones_mask".into(), Value::from(s.run.force_ones_mask));
    m.insert("run.gt_init".into(), Value::from(s.run.gt_init));
    m.insert(
        "backbone.channels".into(),
        Value::from(s.run.backbone.channels.map(|c| c as u64).to_vec()),
    );
    m.insert("masknet.ch_3d_1".into(), Value::from(s.run.masknet.ch_3d_1));
    m.insert("masknet.ch_3d_2".into(), Value::from(s.run.masknet.ch_3d_2));
    m.insert("masknet.ch_2d".into(), Value::from(s.run.masknet.ch_2d));
    m.insert("masknet.ch_fc".into(), Value::from(s.run.masknet.ch_fc));
    m.insert("masknet.fc_kernel".into(), Value::from(s.run.masknet.fc_kernel));
    m.insert("synth.count".into(), Value::from(s.synth_count));
    m.insert("synth.seed".into(), Value::from(s.synth.seed));
    m.insert("synth.frames".into(), Value::from(s.synth.frames));
    m.insert("synth.extent".into(), Value::from(s.synth.extent));
    m.insert("synth.target_size".into(), Value::from(s.synth.target_size));
    m.insert("synth.target_speed".into(), Value::from(s.synth.target_speed));
    m.insert("synth.distractors".into(), Value::from(s.synth.distractors));
    m.insert("synth.distractor_size".into(), Value::from(s.synth.distractor_size));
    m.insert("synth.distractor_speed".into(), Value::from(s.synth.distractor_speed));
    m.insert("synth.noise".into(), Value::from(s.synth.noise));
    m.insert("synth.target_level".into(), Value::from(s.synth.target_level));
    m.insert("synth.distractor_level".into(), Value::from(s.synth.distractor_level));
    m.insert("synth.background_level".into(), Value::from(s.synth.background_level));
    m
}
