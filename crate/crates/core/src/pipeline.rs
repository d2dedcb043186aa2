//! Two-stage per-frame detection loop, both training loops, and
//! masked-vs-plain sequence evaluation.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_backward, backbone_forward, backbone_forward_cached, Backbone, BackboneConfig};
use crate::conv::{ConvLayer, GradientTape};
use crate::error::{Error, Result};
use crate::geometry::{iou, AnchorGrid, BBox, Proposal};
use crate::heatmap::{apply_mask, binarize, build_heatmap, fuse_with_last, threshold_probs, AnchorMask, HeatMapHistory, IouHeatMap};
use crate::image::{Image, Sequence};
use crate::masknet::{masknet_forward, masknet_forward_cached, masknet_loss_and_grads, MaskNet, MaskNetConfig};
use crate::nn::sgd_step;
use crate::rpn::{label_anchors, loss_rpn_total, propose, rpn_forward, rpn_forward_cached, rpn_loss_and_grads, RegDivisor, RpnHead};

/// Every tunable of the system, with desk-scale defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Anchor lattice.
    pub feat_h: usize,
    pub feat_w: usize,
    pub stride: f64,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    // Thresholds and sampling.
    pub heat_thresh: f64,
    pub mask_thresh: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub neg_ratio: usize,
    pub nms_iou: f64,
    pub keep: usize,
    // Training.
    pub lr: f64,
    pub batch: usize,
    pub iterations: usize,
    pub record_every: usize,
    pub seed: u64,
    pub reg_divisor: RegDivisor,
    pub train_backbone: bool,
    // Inference variants.
    pub use_mask: bool,
    pub fusion: bool,
    pub force_ones_mask: bool,
    /// Seed the history with the first frame's ground-truth heat map and
    /// score frames from index 1 (tracker-style initialization).
    pub gt_init: bool,
    // Network shapes.
    pub backbone: BackboneConfig,
    pub masknet: MaskNetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            feat_h: 14,
            feat_w: 14,
            stride: 16.0,
            scales: vec![32.0, 64.0, 128.0],
            ratios: vec![0.5, 1.0, 2.0],
            heat_thresh: 0.3,
            mask_thresh: 0.5,
            pos_iou: 0.7,
            neg_iou: 0.3,
            neg_ratio: 3,
            nms_iou: 0.7,
            keep: 5,
            lr: 0.01,
            batch: 20,
            iterations: 2000,
            record_every: 5,
            seed: 0,
            reg_divisor: RegDivisor::ValidCount,
            train_backbone: true,
            use_mask: true,
            fusion: true,
            force_ones_mask: false,
            gt_init: true,
            backbone: BackboneConfig::default(),
            masknet: MaskNetConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn grid(&self) -> Result<AnchorGrid> {
        AnchorGrid::new(self.feat_h, self.feat_w, self.stride, &self.scales, &self.ratios)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        let bad = |what: &'static str| Err(Error::invalid("config", what.into()));
        if !(0.0..1.0).contains(&self.heat_thresh) {
            return bad("heat_thresh outside [0, 1)");
        }
        if !(self.mask_thresh > 0.0 && self.mask_thresh < 1.0) {
            return bad("mask_thresh outside (0, 1)");
        }
        if !(0.0 <= self.neg_iou && self.neg_iou < self.pos_iou && self.pos_iou <= 1.0) {
            return bad("need 0 <= neg_iou < pos_iou <= 1");
        }
        if self.neg_ratio == 0 {
            return bad("neg_ratio must be at least 1");
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad("nms_iou outside (0, 1]");
        }
        if self.keep == 0 || self.batch == 0 || self.iterations == 0 || self.record_every == 0 {
            return bad("keep, batch, iterations, and record_every must be positive");
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad("learning rate must be finite and non-negative");
        }
        Ok(())
    }
}

/// The three trained components.
#[derive(Debug, Clone, PartialEq)]
pub struct Nets {
    pub backbone: Backbone,
    pub rpn: RpnHead,
    pub masknet: MaskNet,
}

impl Nets {
    /// Freshly initialized networks; parameters are drawn in the fixed
    /// order backbone, RPN head, mask net.
    pub fn new(cfg: &RunConfig, rng: &mut impl Rng) -> Result<Self> {
        let grid = cfg.grid()?;
        let backbone = Backbone::new(&cfg.backbone, rng)?;
        let rpn = RpnHead::new(backbone.out_channels(), grid.k(), rng);
        let masknet = MaskNet::new(&cfg.masknet, rng)?;
        Ok(Nets { backbone, rpn, masknet })
    }
}

/// Everything one frame produces.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame_index: usize,
    /// Top-scoring proposal; absent when the mask admits nothing.
    pub detection: Option<Proposal>,
    pub proposals: Vec<Proposal>,
    pub mask: AnchorMask,
    pub heatmap: IouHeatMap,
    pub iou_vs_gt: Option<f64>,
}

/// One step of the two-stage loop: features, stage-1 mask (all-ones when
/// masking is off, forced, or no history exists yet), gated features,
/// RPN proposals restricted to mask support, NMS, heat map, history push.
/// `inject_zero_mask` replaces the *predicted* (pre-fusion) mask with all
/// zeros to exercise the fusion recovery path.
#[allow(clippy::too_many_arguments)]
pub fn run_frame(
    frame: &Image,
    history: &mut HeatMapHistory,
    nets: &Nets,
    grid: &AnchorGrid,
    cfg: &RunConfig,
    frame_index: usize,
    gt: Option<&BBox>,
    inject_zero_mask: bool,
) -> Result<FrameResult> {
    let features = backbone_forward(&frame.to_tensor(), &nets.backbone)?;
    let mask = if !cfg.use_mask || cfg.force_ones_mask || history.is_empty() {
        // With no prior there is nothing to rule out: the sequence starts
        // with the whole frame eligible.
        AnchorMask::ones(grid.grid_h, grid.grid_w)
    } else {
        let predicted = if inject_zero_mask {
            AnchorMask::zeros(grid.grid_h, grid.grid_w)
        } else {
            threshold_probs(&masknet_forward(history, &nets.masknet)?, cfg.mask_thresh)?
        };
        if cfg.fusion {
            fuse_with_last(&predicted, history.last().expect("history checked non-empty"))?
        } else {
            predicted
        }
    };
    let gated = apply_mask(&features, &mask)?;
    let out = rpn_forward(&gated, &nets.rpn, grid)?;
    let mask_filter = if cfg.use_mask { Some(&mask) } else { None };
    let proposals = propose(&out, grid, mask_filter, cfg.nms_iou, cfg.keep)?;
    let detection = proposals.first().copied();
    let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let heatmap = build_heatmap(&boxes, grid, cfg.heat_thresh)?;
    history.push(frame_index, heatmap.clone())?;
    // A missed frame scores 0 against the ground truth.
    let iou_vs_gt = gt.map(|g| detection.as_ref().map_or(0.0, |d| iou(&d.bbox, g)));
    Ok(FrameResult { frame_index, detection, proposals, mask, heatmap, iou_vs_gt })
}

/// Runs a whole sequence. With `gt_init` the history is seeded from the
/// first frame's ground truth and scoring starts at frame 1; otherwise
/// every frame is scored from a cold start. `inject_zero_mask_at`
/// sabotages the predicted mask at exactly that frame index.
pub fn run_sequence(
    seq: &Sequence,
    nets: &Nets,
    cfg: &RunConfig,
    inject_zero_mask_at: Option<usize>,
) -> Result<Vec<FrameResult>> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut history = HeatMapHistory::new(grid.grid_h, grid.grid_w);
    let start = if cfg.gt_init {
        history.push(0, build_heatmap(&[seq.gt[0]], &grid, cfg.heat_thresh)?)?;
        1
    } else {
        0
    };
    let mut results = Vec::with_capacity(seq.len().saturating_sub(start));
    for i in start..seq.len() {
        results.push(run_frame(
            &seq.frames[i],
            &mut history,
            nets,
            &grid,
            cfg,
            i,
            Some(&seq.gt[i]),
            inject_zero_mask_at == Some(i),
        )?);
    }
    Ok(results)
}

fn record_point(trace: &mut Vec<(usize, f64)>, iter: usize, total: usize, every: usize, loss: f64) -> bool {
    if iter % every == 0 || iter == total {
        if trace.last().map(|&(i, _)| i) != Some(iter) {
            trace.push((iter, loss));
            return true;
        }
    }
    false
}

/// Trains the backbone (unless frozen) and RPN head with seeded SGD over
/// batches of random frames, minimizing the summed score/regression loss
/// without any anchor mask. The trace holds (iteration, batch mean loss)
/// every `record_every` iterations plus the final one; `on_record` sees
/// each recorded point as it happens.
pub fn train_rpn(
    dataset: &[Sequence],
    cfg: &RunConfig,
    mut on_record: impl FnMut(usize, f64),
) -> Result<(Backbone, RpnHead, Vec<(usize, f64)>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let grid = cfg.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut backbone = Backbone::new(&cfg.backbone, &mut rng)?;
    let mut rpn = RpnHead::new(backbone.out_channels(), grid.k(), &mut rng);
    let pool: Vec<(usize, usize)> = dataset
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.len()).map(move |f| (s, f)))
        .collect();
    let inv_b = 1.0 / cfg.batch as f64;
    let mut trace = Vec::new();
    for iter in 1..=cfg.iterations {
        let mut tape = {
            let refs: Vec<&ConvLayer> = backbone
                .layers()
                .into_iter()
                .chain([&rpn.conv_shared, &rpn.conv_score, &rpn.conv_delta])
                .collect();
            GradientTape::zeros_like(&refs)
        };
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let (s, f) = pool[rng.gen_range(0..pool.len())];
            let seq = &dataset[s];
            let bb_fwd = backbone_forward_cached(&seq.frames[f].to_tensor(), &backbone)?;
            let rpn_fwd = rpn_forward_cached(&bb_fwd.output, &rpn, &grid)?;
            let labels = label_anchors(
                &grid,
                &seq.gt[f],
                cfg.pos_iou,
                cfg.neg_iou,
                cfg.neg_ratio,
                rng.gen(),
            )?;
            let (sl, rl, head_tape, d_feat) =
                rpn_loss_and_grads(&rpn_fwd, &rpn, &labels, cfg.reg_divisor)?;
            let mut sample = backbone_backward(&bb_fwd, &backbone, &d_feat)?;
            sample.layers.extend(head_tape.layers);
            tape.add_scaled(&sample, inv_b);
            batch_loss += loss_rpn_total(sl, rl);
        }
        let mean = batch_loss * inv_b;
        if !mean.is_finite() {
            return Err(Error::NumericFailure { context: "train_rpn" });
        }
        if cfg.train_backbone {
            let mut layers: Vec<&mut ConvLayer> = backbone.layers_mut();
            layers.extend([&mut rpn.conv_shared, &mut rpn.conv_score, &mut rpn.conv_delta]);
            sgd_step(&mut layers, &tape, cfg.lr)?;
        } else {
            let head_tape = GradientTape { layers: tape.layers[crate::backbone::BACKBONE_STAGES..].to_vec() };
            let mut layers: Vec<&mut ConvLayer> =
                vec![&mut rpn.conv_shared, &mut rpn.conv_score, &mut rpn.conv_delta];
            sgd_step(&mut layers, &head_tape, cfg.lr)?;
        }
        if record_point(&mut trace, iter, cfg.iterations, cfg.record_every, mean) {
            on_record(iter, mean);
        }
    }
    Ok((backbone, rpn, trace))
}

/// Trains the mask net on (heat-map history -> next-frame mask) pairs
/// built entirely from ground-truth boxes (teacher forcing): for a target
/// frame t the history holds the GT heat maps of up to three preceding
/// frames and the label is the GT mask of frame t.
pub fn train_masknet(
    dataset: &[Sequence],
    cfg: &RunConfig,
    mut on_record: impl FnMut(usize, f64),
) -> Result<(MaskNet, Vec<(usize, f64)>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let grid = cfg.grid()?;
    let pool: Vec<(usize, usize)> = dataset
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (1..seq.len()).map(move |t| (s, t)))
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid(
            "train_masknet",
            "need at least one sequence with two or more frames".into(),
        ));
    }
    // Teacher-forced inputs: per-frame GT heat maps, computed once.
    let heat: Vec<Vec<IouHeatMap>> = dataset
        .iter()
        .map(|seq| {
            seq.gt
                .iter()
                .map(|b| build_heatmap(core::slice::from_ref(b), &grid, cfg.heat_thresh))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = MaskNet::new(&cfg.masknet, &mut rng)?;
    let inv_b = 1.0 / cfg.batch as f64;
    let mut trace = Vec::new();
    for iter in 1..=cfg.iterations {
        let mut tape = GradientTape::zeros_like(&net.layers());
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let (s, t) = pool[rng.gen_range(0..pool.len())];
            let mut history = HeatMapHistory::new(grid.grid_h, grid.grid_w);
            for u in t.saturating_sub(crate::heatmap::HISTORY_DEPTH)..t {
                history.push(u, heat[s][u].clone())?;
            }
            let label = binarize(&heat[s][t]);
            let fwd = masknet_forward_cached(&history, &net)?;
            let (loss, sample) = masknet_loss_and_grads(&fwd, &net, &label)?;
            tape.add_scaled(&sample, inv_b);
            batch_loss += loss;
        }
        let mean = batch_loss * inv_b;
        if !mean.is_finite() {
            return Err(Error::NumericFailure { context: "train_masknet" });
        }
        sgd_step(&mut net.layers_mut(), &tape, cfg.lr)?;
        if record_point(&mut trace, iter, cfg.iterations, cfg.record_every, mean) {
            on_record(iter, mean);
        }
    }
    Ok((net, trace))
}

/// Stable record names for every layer of the three nets.
fn net_layer_names() -> [&'static str; 13] {
    [
        "backbone.stage1", "backbone.stage2", "backbone.stage3", "backbone.stage4",
        "rpn.shared", "rpn.score", "rpn.delta",
        "mask.conv3d_1", "mask.conv3d_2", "mask.conv2d_1", "mask.conv2d_2",
        "mask.fc_conv_1", "mask.fc_conv_2",
    ]
}

fn net_layers<'a>(nets: &'a Nets) -> Vec<&'a ConvLayer> {
    nets.backbone
        .layers()
        .into_iter()
        .chain([&nets.rpn.conv_shared, &nets.rpn.conv_score, &nets.rpn.conv_delta])
        .chain(nets.masknet.layers())
        .collect()
}

/// Serializes all three nets into one checkpoint byte stream.
pub fn nets_to_bytes(nets: &Nets) -> Vec<u8> {
    let mut records = Vec::new();
    for (name, layer) in net_layer_names().into_iter().zip(net_layers(nets)) {
        records.extend(crate::checkpoint::layer_records(name, layer));
    }
    crate::checkpoint::encode_records(&records)
}

/// Rebuilds nets of the configured architecture from checkpoint bytes;
/// fails when any layer is missing or has mismatched dimensions.
pub fn nets_from_bytes(bytes: &[u8], cfg: &RunConfig) -> Result<Nets> {
    let records = crate::checkpoint::decode_records(bytes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut nets = Nets::new(cfg, &mut rng)?;
    let names = net_layer_names();
    let mut layers: Vec<&mut ConvLayer> = nets.backbone.layers_mut();
    layers.extend([&mut nets.rpn.conv_shared, &mut nets.rpn.conv_score, &mut nets.rpn.conv_delta]);
    layers.extend(nets.masknet.layers_mut());
    for (name, layer) in names.into_iter().zip(layers) {
        crate::checkpoint::load_layer(&records, name, layer)?;
    }
    Ok(nets)
}

/// Inference flavor being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Plain,
    Masked,
    MaskedFusion,
}

impl Variant {
    pub fn all() -> [Variant; 3] {
        [Variant::Plain, Variant::Masked, Variant::MaskedFusion]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Masked => "masked",
            Variant::MaskedFusion => "masked+fusion",
        }
    }

    fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Plain => {
                c.use_mask = false;
                c.fusion = false;
            }
            Variant::Masked => {
                c.use_mask = true;
                c.fusion = false;
            }
            Variant::MaskedFusion => {
                c.use_mask = true;
                c.fusion = true;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    pub seq: usize,
    pub frame_index: usize,
    pub variant: Variant,
    pub iou: f64,
    pub score: f64,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqMean {
    pub seq: usize,
    pub variant: Variant,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<EvalFrame>,
    pub seq_means: Vec<SeqMean>,
    pub variant_means: Vec<(Variant, f64)>,
    /// Mean over paired frames of iou(a) - iou(b) for each variant pair,
    /// in the order the variants were requested.
    pub paired_deltas: Vec<(Variant, Variant, f64)>,
}

/// Scores each requested variant over each sequence with shared nets and
/// config (only the mask/fusion switches differ between variants).
pub fn evaluate(
    sequences: &[Sequence],
    nets: &Nets,
    cfg: &RunConfig,
    variants: &[Variant],
) -> Result<EvalReport> {
    if sequences.is_empty() || variants.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut frames = Vec::new();
    let mut seq_means = Vec::new();
    // Per-variant flat IoU lists, aligned across variants frame for frame.
    let mut per_variant: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
    for (s, seq) in sequences.iter().enumerate() {
        for (vi, &v) in variants.iter().enumerate() {
            let results = run_sequence(seq, nets, &v.apply(cfg), None)?;
            let mut sum = 0.0;
            for r in &results {
                let iou = r.iou_vs_gt.unwrap_or(0.0);
                sum += iou;
                per_variant[vi].push(iou);
                frames.push(EvalFrame {
                    seq: s,
                    frame_index: r.frame_index,
                    variant: v,
                    iou,
                    score: r.detection.as_ref().map_or(0.0, |d| d.score),
                    bbox: r.detection.as_ref().map(|d| d.bbox),
                });
            }
            let mean = if results.is_empty() { 0.0 } else { sum / results.len() as f64 };
            seq_means.push(SeqMean { seq: s, variant: v, mean_iou: mean });
        }
    }
    let variant_means = variants
        .iter()
        .zip(&per_variant)
        .map(|(&v, ious)| {
            let m = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
            (v, m)
        })
        .collect();
    let mut paired_deltas = Vec::new();
    for a in 0..variants.len() {
        for b in (a + 1)..variants.len() {
            let n = per_variant[a].len();
            let d = if n == 0 {
                0.0
            } else {
                per_variant[a]
                    .iter()
                    .zip(&per_variant[b])
                    .map(|(x, y)| x - y)
                    .sum::<f64>()
                    / n as f64
            };
            paired_deltas.push((variants[a], variants[b], d));
        }
    }
    Ok(EvalReport { frames, seq_means, variant_means, paired_deltas })
}
