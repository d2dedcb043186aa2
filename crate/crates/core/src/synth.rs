//! Seeded synthetic sequences: a bright square target on a dark noisy
//! background, moving linearly with reflective bounds, plus optional
//! dimmer distractor squares on independent paths.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::{Image, Sequence};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub frames: usize,
    /// Square frame edge length in pixels.
    pub extent: usize,
    pub target_size: f64,
    /// Speed in pixels per frame; the direction is drawn from the seed.
    pub target_speed: f64,
    pub distractors: usize,
    pub distractor_size: f64,
    pub distractor_speed: f64,
    /// Half-range of the uniform background noise, in gray levels.
    pub noise: f64,
    /// Gray levels; the target must stay strictly brighter than the
    /// distractors for the sequences to pose the intended ambiguity.
    pub target_level: f64,
    pub distractor_level: f64,
    pub background_level: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            frames: 20,
            extent: 224,
            target_size: 32.0,
            target_speed: 3.0,
            distractors: 0,
            distractor_size: 32.0,
            distractor_speed: 3.0,
            noise: 8.0,
            target_level: 230.0,
            distractor_level: 215.0,
            background_level: 20.0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::invalid("synth", "frame count must be positive".into()));
        }
        if self.extent < 32 {
            return Err(Error::invalid("synth", "extent must be at least 32".into()));
        }
        let ex = self.extent as f64;
        if !(self.target_size > 0.0 && self.target_size < ex) {
            return Err(Error::invalid(
                "synth",
                format!("target size {} cannot stay inside extent {}", self.target_size, ex),
            ));
        }
        if self.distractors > 0 && !(self.distractor_size > 0.0 && self.distractor_size < ex) {
            return Err(Error::invalid("synth", "distractor size outside the frame".into()));
        }
        let finite = [
            self.target_speed,
            self.distractor_speed,
            self.noise,
            self.target_level,
            self.distractor_level,
            self.background_level,
        ];
        if finite.iter().any(|v| !v.is_finite()) || self.noise < 0.0 {
            return Err(Error::invalid("synth", "non-finite or negative parameter".into()));
        }
        let levels = [self.target_level, self.distractor_level, self.background_level];
        if levels.iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(Error::invalid("synth", "gray levels must lie in [0, 255]".into()));
        }
        Ok(())
    }
}

/// One moving square tracked by its center.
struct Mover {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    half: f64,
}

impl Mover {
    fn bbox(&self) -> BBox {
        BBox::new(
            self.cx - self.half,
            self.cy - self.half,
            self.cx + self.half,
            self.cy + self.half,
        )
    }

    /// Linear step with reflection keeping the center inside [lo, hi].
    fn step(&mut self, lo: f64, hi: f64) {
        self.cx += self.vx;
        self.cy += self.vy;
        loop {
            if self.cx < lo {
                self.cx = 2.0 * lo - self.cx;
                self.vx = -self.vx;
            } else if self.cx > hi {
                self.cx = 2.0 * hi - self.cx;
                self.vx = -self.vx;
            } else if self.cy < lo {
                self.cy = 2.0 * lo - self.cy;
                self.vy = -self.vy;
            } else if self.cy > hi {
                self.cy = 2.0 * hi - self.cy;
                self.vy = -self.vy;
            } else {
                break;
            }
        }
    }
}

fn spawn(rng: &mut ChaCha8Rng, half: f64, speed: f64, extent: f64) -> Mover {
    let lo = half;
    let hi = extent - half;
    let cx = rng.gen_range(lo..=hi);
    let cy = rng.gen_range(lo..=hi);
    let angle = rng.gen_range(0.0..core::f64::consts::TAU);
    Mover { cx, cy, vx: speed * libm::cos(angle), vy: speed * libm::sin(angle), half }
}

fn draw_square(pixels: &mut [f64], extent: usize, b: &BBox, level: f64) {
    // A pixel is covered when its center lies inside the box.
    let ys = libm::ceil(b.y1 - 0.5).max(0.0) as usize;
    let xs = libm::ceil(b.x1 - 0.5).max(0.0) as usize;
    let ye = (libm::floor(b.y2 - 0.5) as usize).min(extent - 1);
    let xe = (libm::floor(b.x2 - 0.5) as usize).min(extent - 1);
    for y in ys..=ye {
        for x in xs..=xe {
            pixels[y * extent + x] = level;
        }
    }
}

/// Fully seed-determined sequence; the ground truth tracks the target
/// exactly and every frame quantizes to whole gray levels so 8-bit export
/// round-trips losslessly.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Sequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ex = spec.extent as f64;
    let mut target = spawn(&mut rng, spec.target_size / 2.0, spec.target_speed, ex);
    let mut distractors = Vec::with_capacity(spec.distractors);
    for _ in 0..spec.distractors {
        // Keep distractors clear of the target's starting position so the
        // first frame is unambiguous; later crossings are allowed.
        let clearance = (spec.target_size + spec.distractor_size) * 0.75;
        let m = loop {
            let m = spawn(&mut rng, spec.distractor_size / 2.0, spec.distractor_speed, ex);
            let d = libm::hypot(m.cx - target.cx, m.cy - target.cy);
            if d >= clearance {
                break m;
            }
        };
        distractors.push(m);
    }

    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt = Vec::with_capacity(spec.frames);
    let n = spec.extent * spec.extent;
    for f in 0..spec.frames {
        if f > 0 {
            target.step(target.half, ex - target.half);
            for d in &mut distractors {
                d.step(d.half, ex - d.half);
            }
        }
        let mut pixels = vec![0.0f64; n];
        for p in pixels.iter_mut() {
            let v = spec.background_level + rng.gen_range(-spec.noise..=spec.noise);
            *p = libm::round(v.clamp(0.0, 255.0));
        }
        for d in &distractors {
            draw_square(&mut pixels, spec.extent, &d.bbox(), spec.distractor_level);
        }
        draw_square(&mut pixels, spec.extent, &target.bbox(), spec.target_level);
        frames.push(Image::new(spec.extent, spec.extent, pixels)?);
        gt.push(target.bbox());
    }
    Sequence::new(
        format!("synth-{}", spec.seed),
        frames,
        gt,
        spec.extent,
        spec.extent,
    )
}
