//! The acceptance gate: nine end-to-end checks, one test per criterion,
//! covering gradient fidelity, geometry and heat-map oracles, masking
//! equivalence, training-loss decrease, the masked-vs-plain benefit,
//! fusion recovery, the negative-sampling contract, and the ground-truth
//! parser. Training runs once and is shared by the criteria that need it.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use amrpn_core::geometry::{
    decode, encode, iou, nms, AnchorGrid, BBox, Proposal, FRAME_EXTENT,
};
use amrpn_core::heatmap::build_heatmap;
use amrpn_core::image::Sequence;
use amrpn_core::pipeline::{
    evaluate, run_sequence, train_masknet, train_rpn, Nets, RunConfig, Variant,
};
use amrpn_core::rpn::{label_anchors, loss_rpn_scores, RegDivisor, RpnOutput};
use amrpn_core::synth::{generate_synthetic, SynthSpec};
use amrpn_core::vot::parse_vot_groundtruth;
use common::{gradchecks, heatmap_reference, iou_by_rasterization, mean, nms_reference, FD_TOL};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Trained {
    cfg: RunConfig,
    nets: Nets,
    rpn_trace: Vec<(usize, f64)>,
    mask_trace: Vec<(usize, f64)>,
    train_secs: f64,
}

fn training_set() -> Vec<Sequence> {
    (100u64..120)
        .map(|seed| {
            generate_synthetic(&SynthSpec { seed, frames: 12, ..SynthSpec::default() })
                .expect("valid synthetic spec")
        })
        .collect()
}

/// Trains both nets once, at the default configuration, on a fixed
/// 20-sequence distractor-free set; every criterion that needs a trained
/// model shares this instance.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = RunConfig { record_every: 1, ..RunConfig::default() };
        let dataset = training_set();
        let t0 = Instant::now();
        let (backbone, rpn, rpn_trace) =
            train_rpn(&dataset, &cfg, |_, _| {}).expect("rpn training");
        // The mask net gets the full 10,000-iteration run: its labels are
        // sparse (a handful of foreground pixels out of 196), and the
        // mean-pixel cross entropy needs more than the 2,000-iteration desk
        // default before the foreground probabilities clear the 0.5 mask
        // threshold instead of hedging near the all-background optimum.
        // Per-iteration RNG consumption does not depend on the configured
        // total, so with record_every = 1 the first 2,000 trace points are
        // bit-identical to a standalone 2,000-iteration run; criterion 5
        // scores that prefix.
        let mask_cfg = RunConfig { iterations: 10_000, ..cfg.clone() };
        let (masknet, mask_trace) =
            train_masknet(&dataset, &mask_cfg, |_, _| {}).expect("mask training");
        let train_secs = t0.elapsed().as_secs_f64();
        let mut nets = Nets::new(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
            .expect("net construction");
        nets.backbone = backbone;
        nets.rpn = rpn;
        nets.masknet = masknet;
        Trained { cfg, nets, rpn_trace, mask_trace, train_secs }
    })
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for &seed in gradchecks::SEEDS.iter() {
        worst.push(("conv2d", gradchecks::conv2d_err(seed)));
        worst.push(("conv3d", gradchecks::conv3d_err(seed)));
        worst.push(("relu", gradchecks::relu_err(seed)));
        worst.push(("pixel_softmax", gradchecks::pixel_softmax_err(seed)));
        worst.push(("maxpool", gradchecks::maxpool_err(seed)));
        worst.push(("proposal_loss", gradchecks::rpn_loss_err(seed, RegDivisor::ValidCount)));
        worst.push((
            "proposal_loss_pos_divisor",
            gradchecks::rpn_loss_err(seed, RegDivisor::PositiveCount),
        ));
        worst.push(("mask_loss", gradchecks::mask_loss_err(seed, 1)));
    }
    let (name, err) = worst
        .iter()
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty probe list");
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "criterion 1: max relative error {err:.3e} ({name}) over {} seeds in {secs:.2}s",
        gradchecks::SEEDS.len()
    );
    assert!(err <= FD_TOL, "worst gradient error {err:.3e} in {name} exceeds {FD_TOL:.0e}");
    assert!(secs < 120.0, "gradient checks took {secs:.1}s, budget is 120s");
}

fn random_integer_box(rng: &mut ChaCha8Rng, hi: i64) -> BBox {
    let a = rng.gen_range(0..=hi);
    let b = rng.gen_range(0..=hi);
    let c = rng.gen_range(0..=hi);
    let d = rng.gen_range(0..=hi);
    BBox::new(a.min(b) as f64, c.min(d) as f64, a.max(b) as f64, c.max(d) as f64)
}

#[test]
fn criterion_2_geometry_matches_independent_oracles() {
    // IoU against pixel counting on 1,000 integer box pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC0);
    let mut max_iou_err: f64 = 0.0;
    for i in 0..1000 {
        let a = random_integer_box(&mut rng, 64);
        let b = if i % 10 == 0 { a } else { random_integer_box(&mut rng, 64) };
        let err = (iou(&a, &b) - iou_by_rasterization(&a, &b)).abs();
        max_iou_err = max_iou_err.max(err);
        assert!(err <= 1e-9, "pair {i}: iou off by {err} for {a:?} / {b:?}");
    }

    // NMS against the quadratic reference on 500 lattice instances whose
    // ties and duplicates exercise the ordering rules.
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC1);
    for i in 0..500 {
        let n = rng.gen_range(0..=30usize);
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        let mut props: Vec<Proposal> = (0..n)
            .map(|j| {
                let x = rng.gen_range(0..14) as f64 * 4.0;
                let y = rng.gen_range(0..14) as f64 * 4.0;
                let w = rng.gen_range(1..=8) as f64 * 4.0;
                let h = rng.gen_range(1..=8) as f64 * 4.0;
                Proposal {
                    bbox: BBox::new(x, y, x + w, y + h),
                    score: rng.gen_range(0..=10) as f64 / 10.0,
                    anchor_index: indices[j],
                }
            })
            .collect();
        if n >= 2 {
            let dup = Proposal { anchor_index: props[n - 1].anchor_index, ..props[0] };
            props[n - 1] = dup;
        }
        let thresh = rng.gen_range(1..=10) as f64 / 10.0;
        let keep = rng.gen_range(1..=n + 3);
        let fast = nms(&props, thresh, keep).expect("valid parameters");
        assert_eq!(
            fast,
            nms_reference(&props, thresh, keep),
            "instance {i} (n={n}, thresh={thresh}, keep={keep})"
        );
    }

    // Encode/decode round-trip over 10,000 anchor/target pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC2);
    let grid = AnchorGrid::standard();
    let mut max_rt_err: f64 = 0.0;
    for i in 0..10_000 {
        let anchor = if i % 2 == 0 {
            grid.anchors()[rng.gen_range(0..grid.len())]
        } else {
            let w = rng.gen_range(4.0..=128.0);
            let h = rng.gen_range(4.0..=128.0);
            let cx = rng.gen_range(0.0..=FRAME_EXTENT);
            let cy = rng.gen_range(0.0..=FRAME_EXTENT);
            BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
        };
        let tw = rng.gen_range(2.0..=200.0);
        let th = rng.gen_range(2.0..=200.0);
        let tx1 = rng.gen_range(0.0..=FRAME_EXTENT - tw);
        let ty1 = rng.gen_range(0.0..=FRAME_EXTENT - th);
        let target = BBox::new(tx1, ty1, tx1 + tw, ty1 + th);
        let back = decode(&anchor, &encode(&anchor, &target).expect("positive extents"))
            .expect("finite deltas");
        for (got, want) in [
            (back.x1, target.x1),
            (back.y1, target.y1),
            (back.x2, target.x2),
            (back.y2, target.y2),
        ] {
            let err = (got - want).abs();
            max_rt_err = max_rt_err.max(err);
            assert!(err <= 1e-9, "pair {i}: corner off by {err}");
        }
    }
    println!(
        "criterion 2: iou err {max_iou_err:.2e} (1000 pairs), nms exact (500), \
         roundtrip err {max_rt_err:.2e} (10000 pairs)"
    );
}

#[test]
fn criterion_3_heatmap_matches_exhaustive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3EA7);
    let grids = [
        AnchorGrid::standard(),
        AnchorGrid::new(5, 7, 32.0, &[48.0], &[1.0]).expect("valid grid"),
        AnchorGrid::new(3, 3, 16.0, &[16.0, 64.0], &[0.5, 2.0]).expect("valid grid"),
    ];
    let mut populated = 0usize;
    for scene in 0..100 {
        let grid = &grids[scene % grids.len()];
        let threshold = (scene % 10) as f64 / 10.0;
        let n_boxes = rng.gen_range(0..=8usize);
        let boxes: Vec<BBox> = (0..n_boxes)
            .map(|j| {
                if j == 0 && scene % 7 == 0 {
                    // A degenerate point box: zero area, zero IoU everywhere.
                    let x = rng.gen_range(0.0..224.0);
                    let y = rng.gen_range(0.0..224.0);
                    BBox::new(x, y, x, y)
                } else if j == 1 && scene % 11 == 0 {
                    // Fully outside the frame.
                    BBox::new(300.0, 300.0, 340.0, 340.0)
                } else {
                    let w = rng.gen_range(8.0..=120.0);
                    let h = rng.gen_range(8.0..=120.0);
                    let x = rng.gen_range(-20.0..=224.0);
                    let y = rng.gen_range(-20.0..=224.0);
                    BBox::new(x, y, x + w, y + h)
                }
            })
            .collect();
        let got = build_heatmap(&boxes, grid, threshold).expect("valid threshold");
        assert_eq!(
            got.values(),
            &heatmap_reference(&boxes, grid, threshold)[..],
            "scene {scene} (threshold {threshold})"
        );
        // Compare the raw maxima too so high-threshold scenes still verify
        // the interesting part.
        let raw = build_heatmap(&boxes, grid, 0.0).expect("zero threshold");
        assert_eq!(
            raw.values(),
            &heatmap_reference(&boxes, grid, 0.0)[..],
            "scene {scene} (raw maxima)"
        );
        if raw.values().iter().any(|&v| v > 0.0) {
            populated += 1;
        }
    }
    println!("criterion 3: 100 scenes bitwise-equal to the exhaustive reference");
    assert!(populated > 50, "only {populated} scenes had any support; sampler too sparse");
}

#[test]
fn criterion_4_all_ones_mask_is_bit_identical_to_plain() {
    let cfg = RunConfig::default();
    let nets = Nets::new(&cfg, &mut ChaCha8Rng::seed_from_u64(999)).expect("net construction");
    let seq = generate_synthetic(&SynthSpec { seed: 4242, frames: 8, ..SynthSpec::default() })
        .expect("valid spec");

    let mut plain = cfg.clone();
    plain.use_mask = false;
    let mut forced = cfg.clone();
    forced.use_mask = true;
    forced.force_ones_mask = true;

    let a = run_sequence(&seq, &nets, &plain, None).expect("plain run");
    let b = run_sequence(&seq, &nets, &forced, None).expect("forced-ones run");
    assert_eq!(a, b, "forced all-ones mask must not change a single bit");
    println!("criterion 4: {} frames bit-identical between plain and forced-ones runs", a.len());
}

#[test]
fn criterion_5_training_losses_drop() {
    let t = trained();
    assert!(t.rpn_trace.len() >= 200, "trace too short: {}", t.rpn_trace.len());
    assert!(t.mask_trace.len() >= 2000, "trace too short: {}", t.mask_trace.len());
    let lead = |trace: &[(usize, f64)]| mean(&trace[..10].iter().map(|&(_, l)| l).collect::<Vec<_>>());
    let trail = |trace: &[(usize, f64)]| {
        mean(&trace[trace.len() - 100..].iter().map(|&(_, l)| l).collect::<Vec<_>>())
    };
    // The mask net trains longer for the downstream criteria; the loss-decay
    // check is defined over the 2,000-iteration protocol, which is exactly
    // the first 2,000 points of the recorded trace (record_every = 1).
    let mask_desk = &t.mask_trace[..2000];
    let (rpn_lead, rpn_trail) = (lead(&t.rpn_trace), trail(&t.rpn_trace));
    let (mask_lead, mask_trail) = (lead(mask_desk), trail(mask_desk));
    println!(
        "criterion 5: proposal loss {rpn_lead:.4} -> {rpn_trail:.4} (ratio {:.3}, need <= 0.3), \
         mask loss {mask_lead:.4} -> {mask_trail:.4} (ratio {:.3}, need <= 0.5), \
         trained in {:.0}s (budget 1800s)",
        rpn_trail / rpn_lead,
        mask_trail / mask_lead,
        t.train_secs
    );
    assert!(
        rpn_trail <= 0.3 * rpn_lead,
        "proposal loss: trailing-100 mean {rpn_trail} vs leading-10 mean {rpn_lead}"
    );
    assert!(
        mask_trail <= 0.5 * mask_lead,
        "mask loss: trailing-100 mean {mask_trail} vs leading-10 mean {mask_lead}"
    );
    assert!(t.train_secs < 1800.0, "training took {:.0}s, budget is 1800s", t.train_secs);
}

#[test]
fn criterion_6_masking_beats_plain_on_distractor_scenes() {
    let t = trained();
    // Held-out scenes: one distractor of the same size, speed and
    // brightness as the target, so appearance alone cannot separate them.
    let held_out: Vec<Sequence> = (1000u64..1050)
        .map(|seed| {
            generate_synthetic(&SynthSpec {
                seed,
                frames: 12,
                distractors: 1,
                distractor_level: 230.0,
                ..SynthSpec::default()
            })
            .expect("valid spec")
        })
        .collect();
    let report = evaluate(
        &held_out,
        &t.nets,
        &t.cfg,
        &[Variant::Masked, Variant::Plain, Variant::MaskedFusion],
    )
    .expect("evaluation");
    let mean_of = |v: Variant| {
        report
            .variant_means
            .iter()
            .find(|(x, _)| *x == v)
            .map(|&(_, m)| m)
            .expect("variant present")
    };
    let (masked, plain, fused) =
        (mean_of(Variant::Masked), mean_of(Variant::Plain), mean_of(Variant::MaskedFusion));
    println!(
        "criterion 6: mean IoU masked {masked:.4} vs plain {plain:.4} \
         (delta {:.4}, need >= 0.05; masked+fusion {fused:.4})",
        masked - plain
    );
    assert!(
        masked - plain >= 0.05,
        "masked {masked:.4} must beat plain {plain:.4} by at least 0.05"
    );
}

#[test]
fn criterion_7_fusion_recovers_from_a_zeroed_mask() {
    let t = trained();
    let seq = generate_synthetic(&SynthSpec { seed: 7777, frames: 12, ..SynthSpec::default() })
        .expect("valid spec");
    let inject_at = 6usize;

    let baseline = run_sequence(&seq, &t.nets, &t.cfg, None).expect("baseline run");
    let with_fusion =
        run_sequence(&seq, &t.nets, &t.cfg, Some(inject_at)).expect("injected run");
    // With gt_init the results start at frame 1, so frame f sits at f-1.
    let iou_at = |results: &[amrpn_core::pipeline::FrameResult], f: usize| {
        results[f - 1].iou_vs_gt.expect("scored frame")
    };
    let mut recovered = None;
    for f in inject_at..=inject_at + 2 {
        let base = iou_at(&baseline, f);
        let hit = iou_at(&with_fusion, f);
        assert!(base > 0.0, "baseline lost the target at frame {f}; probe is meaningless");
        if hit >= 0.9 * base {
            recovered = Some((f, hit, base));
            break;
        }
    }
    let (f, hit, base) = recovered.unwrap_or_else(|| {
        panic!(
            "no frame in {:?} got back to 90% of baseline; injected {:.3} vs baseline {:.3} at +2",
            inject_at..=inject_at + 2,
            iou_at(&with_fusion, inject_at + 2),
            iou_at(&baseline, inject_at + 2),
        )
    });

    let mut no_fusion_cfg = t.cfg.clone();
    no_fusion_cfg.fusion = false;
    let without_fusion =
        run_sequence(&seq, &t.nets, &no_fusion_cfg, Some(inject_at)).expect("no-fusion run");
    let sabotaged = &without_fusion[inject_at - 1];
    assert!(
        sabotaged.detection.is_none(),
        "a zeroed mask without fusion must leave nothing to propose"
    );
    assert_eq!(sabotaged.mask.count_ones(), 0);
    println!(
        "criterion 7: fusion recovered at frame {f} ({hit:.3} vs baseline {base:.3}); \
         without fusion frame {inject_at} had no detection"
    );
}

#[test]
fn criterion_8_negative_sampling_ratio_and_ignore_invariance() {
    let grid = AnchorGrid::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5A3917);
    let mut capped_scenes = 0usize;
    for scene in 0..200 {
        let w = rng.gen_range(16.0..=160.0);
        let h = rng.gen_range(16.0..=160.0);
        let x = rng.gen_range(0.0..=224.0 - w);
        let y = rng.gen_range(0.0..=224.0 - h);
        let gt = BBox::new(x, y, x + w, y + h);
        let labels = label_anchors(&grid, &gt, 0.7, 0.3, 3, rng.gen()).expect("labeling");

        // Independent recount of the contract's two sides.
        let ious: Vec<f64> = grid.anchors().iter().map(|a| iou(a, &gt)).collect();
        let mut best = 0usize;
        for (i, &v) in ious.iter().enumerate() {
            if v > ious[best] {
                best = i;
            }
        }
        let positive = |i: usize| ious[i] >= 0.7 || i == best;
        let n_pos = (0..grid.len()).filter(|&i| positive(i)).count();
        let eligible = (0..grid.len()).filter(|&i| !positive(i) && ious[i] < 0.3).count();
        let n_neg = labels.labels.iter().filter(|&&l| l == 0).count();
        let got_pos = labels.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(got_pos, n_pos, "scene {scene}: positive count disagrees");
        assert_eq!(
            n_neg,
            (3 * n_pos).min(eligible),
            "scene {scene}: expected exactly min(3*{n_pos}, {eligible}) negatives"
        );
        assert_eq!(labels.n_valid, n_pos + n_neg, "scene {scene}: valid count disagrees");
        if 3 * n_pos <= eligible {
            capped_scenes += 1;
        }
    }
    // The 3x clause is only exercised when candidates suffice; on a
    // 224-pixel frame with one box they essentially always do.
    assert!(capped_scenes > 150, "only {capped_scenes} scenes hit the 3-per-positive clause");

    // Score loss ignores -1 anchors entirely: perturbing their scores must
    // not move a single bit of the loss.
    let mut max_pert_checked = 0usize;
    for trial in 0..20 {
        let gt = BBox::new(40.0, 60.0, 120.0, 140.0);
        let labels = label_anchors(&grid, &gt, 0.7, 0.3, 3, trial).expect("labeling");
        let scores: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(0.01..0.99)).collect();
        let out = RpnOutput {
            feat_h: grid.grid_h,
            feat_w: grid.grid_w,
            k: grid.k(),
            scores: scores.clone(),
            deltas: vec![amrpn_core::geometry::BoxDeltas::ZERO; grid.len()],
        };
        let before = loss_rpn_scores(&out, &labels).expect("score loss");
        let mut perturbed = scores;
        let mut touched = 0usize;
        for (i, &l) in labels.labels.iter().enumerate() {
            if l == -1 {
                perturbed[i] = rng.gen_range(0.01..0.99);
                touched += 1;
            }
        }
        let out2 = RpnOutput { scores: perturbed, ..out };
        let after = loss_rpn_scores(&out2, &labels).expect("score loss");
        assert_eq!(
            before.to_bits(),
            after.to_bits(),
            "trial {trial}: loss moved after perturbing {touched} ignored anchors"
        );
        max_pert_checked = max_pert_checked.max(touched);
    }
    assert!(max_pert_checked > 100, "too few ignored anchors perturbed to mean anything");
    println!(
        "criterion 8: 200 scenes honored min(3*positives, eligible); \
         score loss bit-stable under ignored-anchor perturbation"
    );
}

#[test]
fn criterion_9_groundtruth_parser_fixtures() {
    // Axis-aligned polygon, native 224x224: corners map straight through.
    let axis = "10,10,30,10,30,20,10,20\n";
    let got = parse_vot_groundtruth(axis, 224, 224).expect("axis-aligned polygon");
    assert_eq!(got, vec![BBox::new(10.0, 10.0, 30.0, 20.0)]);

    // Same panel at 448x448 halves every coordinate.
    let got = parse_vot_groundtruth(axis, 448, 448).expect("scaled polygon");
    assert_eq!(got, vec![BBox::new(5.0, 5.0, 15.0, 10.0)]);

    // A rotated square covers its axis-aligned hull.
    let rotated = "10,0,20,10,10,20,0,10\n";
    let got = parse_vot_groundtruth(rotated, 224, 224).expect("rotated polygon");
    assert_eq!(got, vec![BBox::new(0.0, 0.0, 20.0, 20.0)]);

    // Legacy 4-field rows and polygons may mix; blank lines don't count.
    let mixed = "10,10,30,10,30,20,10,20\n\n5,5,10,10\n";
    let got = parse_vot_groundtruth(mixed, 224, 224).expect("mixed formats");
    assert_eq!(got, vec![BBox::new(10.0, 10.0, 30.0, 20.0), BBox::new(5.0, 5.0, 15.0, 15.0)]);

    // Malformed rows report their 1-based line number.
    let bad = "10,10,30,10,30,20,10,20\n1,2,three\n";
    match parse_vot_groundtruth(bad, 224, 224) {
        Err(amrpn_core::error::Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a line-numbered parse error, got {other:?}"),
    }
    let bad_count = "1,2,3,4,5\n";
    match parse_vot_groundtruth(bad_count, 224, 224) {
        Err(amrpn_core::error::Error::Parse { line, .. }) => assert_eq!(line, 1),
        other => panic!("expected a line-numbered parse error, got {other:?}"),
    }
    println!("criterion 9: polygon fixtures exact; malformed rows carry line numbers");
}
