//! Synthetic scenes of rectangles, discs and annuli on a noisy background.
//!
//! Category 0 is background. Foreground category `c` is always drawn with
//! shape family `(c − 1) mod 3` and a base colour fixed by `c`; every
//! instance jitters that colour, so categories sharing a family are told
//! apart by colour alone and vice versa.

use serde::{Deserialize, Serialize};

use super::SegSample;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub samples: usize,
    pub size: usize,
    pub categories: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Per-pixel additive noise amplitude on the [0, 1] scale.
    pub noise: f64,
    /// Per-instance colour jitter amplitude.
    pub jitter: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, samples: usize, size: usize, categories: usize) -> Self {
        Self {
            seed,
            samples,
            size,
            categories,
            min_shapes: categories.saturating_sub(1).max(1),
            max_shapes: categories + 1,
            noise: 0.06,
            jitter: 0.08,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.categories < 2 || self.categories > 256 {
            errs.push(format!("categories: {} not in 2..=256", self.categories));
        }
        if self.size == 0 || !self.size.is_multiple_of(4) {
            errs.push(format!("size: {} must be a positive multiple of 4", self.size));
        }
        if self.min_shapes > self.max_shapes {
            errs.push(format!(
                "shapes: min {} exceeds max {}",
                self.min_shapes, self.max_shapes
            ));
        }
        if !(self.noise >= 0.0 && self.noise <= 1.0) {
            errs.push(format!("noise: {} not in [0, 1]", self.noise));
        }
        if !(self.jitter >= 0.0 && self.jitter <= 1.0) {
            errs.push(format!("jitter: {} not in [0, 1]", self.jitter));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Colour of category `c` before jitter.
pub fn base_color(c: usize) -> [f64; 3] {
    if c == 0 {
        return [0.42, 0.40, 0.36];
    }
    // spread hues by the golden angle
    let hue = ((c - 1) as f64 * 0.618_033_988_749_895).fract();
    hsv(hue, 0.65, 0.85)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Rect,
    Disc,
    Annulus,
}

pub fn family(category: usize) -> ShapeFamily {
    match (category - 1) % 3 {
        0 => ShapeFamily::Rect,
        1 => ShapeFamily::Disc,
        _ => ShapeFamily::Annulus,
    }
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    family: ShapeFamily,
    cx: f64,
    cy: f64,
    /// Half-width / outer radius.
    a: f64,
    /// Half-height / inner radius.
    b: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.family {
            ShapeFamily::Rect => dx.abs() <= self.a && dy.abs() <= self.b,
            ShapeFamily::Disc => dx * dx + dy * dy <= self.a * self.a,
            ShapeFamily::Annulus => {
                let d2 = dx * dx + dy * dy;
                d2 <= self.a * self.a && d2 >= self.b * self.b
            }
        }
    }

    fn random(family: ShapeFamily, size: usize, rng: &mut SplitMix64) -> Self {
        let s = size as f64;
        let (lo, hi) = (s * 0.1, s * 0.25);
        let a = rng.uniform(lo, hi);
        let b = match family {
            ShapeFamily::Rect => rng.uniform(lo, hi),
            ShapeFamily::Disc => 0.0,
            ShapeFamily::Annulus => a * rng.uniform(0.35, 0.6),
        };
        Self {
            family,
            cx: rng.uniform(0.0, s),
            cy: rng.uniform(0.0, s),
            a,
            b,
        }
    }
}

/// One sample, a pure function of `(cfg, index)`.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> SegSample {
    let mut rng = SplitMix64::stream(cfg.seed, index as u64);
    let size = cfg.size;
    let count = rng.range(cfg.min_shapes, cfg.max_shapes);
    let mut order: Vec<usize> = (1..cfg.categories).collect();
    rng.shuffle(&mut order);

    let mut fill = vec![jittered(base_color(0), cfg.jitter, &mut rng)];
    let mut label = vec![0u8; size * size];
    let mut color_map = vec![0usize; size * size];
    for s in 0..count {
        let category = if s < order.len() {
            order[s]
        } else {
            rng.range(1, cfg.categories - 1)
        };
        let shape = Shape::random(family(category), size, &mut rng);
        fill.push(jittered(base_color(category), cfg.jitter, &mut rng));
        let slot = fill.len() - 1;
        for y in 0..size {
            for x in 0..size {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    label[y * size + x] = category as u8;
                    color_map[y * size + x] = slot;
                }
            }
        }
    }

    let mut image = Vec::with_capacity(size * size * 3);
    for &slot in &color_map {
        for &base in &fill[slot] {
            let noise = if cfg.noise > 0.0 {
                rng.uniform(-cfg.noise, cfg.noise)
            } else {
                0.0
            };
            image.push(quantize(base + noise));
        }
    }
    SegSample {
        width: size,
        height: size,
        image,
        label,
    }
}

fn jittered(c: [f64; 3], amp: f64, rng: &mut SplitMix64) -> [f64; 3] {
    if amp == 0.0 {
        return c;
    }
    c.map(|v| v + rng.uniform(-amp, amp))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-category statistics over a generated set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    /// Fraction of all pixels carrying each category.
    pub pixel_frequency: Vec<f64>,
    /// Fraction of samples in which each category has at least one pixel.
    pub presence: Vec<f64>,
    pub label_counts: Vec<u64>,
}

impl SynthReport {
    pub fn scan(samples: &[SegSample], categories: usize) -> Self {
        let mut counts = vec![0u64; categories];
        let mut present = vec![0usize; categories];
        for s in samples {
            let mut seen = vec![false; categories];
            for &l in &s.label {
                counts[l as usize] += 1;
                seen[l as usize] = true;
            }
            for (p, s) in present.iter_mut().zip(seen) {
                *p += s as usize;
            }
        }
        let total: u64 = counts.iter().sum();
        Self {
            pixel_frequency: counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect(),
            presence: present
                .iter()
                .map(|&p| p as f64 / samples.len().max(1) as f64)
                .collect(),
            label_counts: counts,
        }
    }
}

/// Minimum fraction of samples in which every foreground category appears
/// when each image is guaranteed one shape per category.
pub const MIN_PRESENCE: f64 = 0.8;

pub fn generate(cfg: &SynthConfig) -> Result<(Vec<SegSample>, SynthReport)> {
    generate_range(cfg, 0..cfg.samples)
}

/// Samples `range` of the stream defined by `cfg`, with the presence
/// post-scan applied to them.
pub fn generate_range(cfg: &SynthConfig, range: std::ops::Range<usize>) -> Result<(Vec<SegSample>, SynthReport)> {
    cfg.validate()?;
    let samples: Vec<SegSample> = range.map(|i| generate_sample(cfg, i)).collect();
    let report = SynthReport::scan(&samples, cfg.categories);
    if !samples.is_empty() && cfg.min_shapes + 1 >= cfg.categories {
        for (c, &p) in report.presence.iter().enumerate().skip(1) {
            if p < MIN_PRESENCE {
                return Err(Error::invalid(
                    "synth",
                    format!("category {c} present in only {:.1}% of samples", 100.0 * p),
                ));
            }
        }
    }
    Ok((samples, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_scene_is_constant_background() {
        let mut cfg = SynthConfig::new(3, 2, 8, 3);
        cfg.min_shapes = 0;
        cfg.max_shapes = 0;
        cfg.noise = 0.0;
        cfg.jitter = 0.0;
        let s = generate_sample(&cfg, 1);
        assert!(s.label.iter().all(|&l| l == 0));
        let bg = base_color(0).map(quantize);
        assert!(s.image.chunks(3).all(|px| px == bg));
    }

    #[test]
    fn samples_depend_only_on_seed_and_index() {
        let cfg = SynthConfig::new(11, 4, 16, 4);
        let (all, _) = generate(&cfg).unwrap();
        assert_eq!(all[2], generate_sample(&cfg, 2));
        assert_ne!(all[1], all[2]);
        let (again, _) = generate(&cfg).unwrap();
        assert_eq!(all, again);
    }

    #[test]
    fn families_cycle() {
        assert_eq!(family(1), ShapeFamily::Rect);
        assert_eq!(family(2), ShapeFamily::Disc);
        assert_eq!(family(3), ShapeFamily::Annulus);
        assert_eq!(family(4), ShapeFamily::Rect);
    }

    #[test]
    fn rejects_size_not_divisible_by_four() {
        assert!(SynthConfig::new(0, 1, 30, 4).validate().is_err());
        assert!(SynthConfig::new(0, 1, 32, 1).validate().is_err());
    }
}
